# plugins/mos_plugin.py
import logging
from dataclasses import replace

import numpy as np

from merging import weighted_average_merge
from plugin_base import MergePlugin
from scoring import SynergyPlan, mos_weights
from tensor_store import flatten_checkpoint
from tta_sim import head_params, predict

logger = logging.getLogger(__name__)


class MosPlugin(MergePlugin):
    name = "mos"
    usage = "codemerge merge --codebook INDEX --method mos --k 5 --jitter 1e-6 --out MERGED"
    description = "Kernel-synergy merge of the K most recent checkpoints (inverse-kernel row sums)."
    platforms = ["cli", "sim"]
    start_from = "latest"

    def _plan(self, entries, outputs, features, scoring):
        if len(entries) == 1:
            return SynergyPlan((entries[0].step,), (1.0,), (1.0,))
        weights = mos_weights(outputs, features, jitter=scoring.kernel_jitter,
                              clamp_negative=scoring.clamp_negative)
        if np.any(weights < 0):
            logger.warning(f"Synergy weights contain negatives: {np.round(weights, 4).tolist()}")
        return SynergyPlan(
            selected_steps=tuple(entry.step for entry in entries),
            raw_scores=tuple(float(w) for w in weights),
            weights=tuple(float(w) for w in weights),
        )

    def handle_cli(self, codebook, scoring, policy):
        # No forward model here: parameters stand in for outputs, fingerprints for features.
        entries = codebook.snapshot()[-int(scoring.top_k):]
        checkpoints = [codebook.resolve(entry) for entry in entries]
        outputs = [flatten_checkpoint(c) for c in checkpoints]
        features = [entry.fingerprint.values for entry in entries]
        plan = self._plan(entries, outputs, features, scoring)
        return plan, weighted_average_merge(checkpoints, plan.weights)

    def sim_merge(self, state, features):
        entries = state.codebook.snapshot()[-int(state.scoring.top_k):]
        checkpoints = [state.codebook.resolve(entry) for entry in entries]
        # One forward pass per buffered model, as the kernel needs every model's output.
        outputs = np.stack([predict(c, features) for c in checkpoints])
        pooled = features.mean(axis=0)
        contributions = np.stack([pooled * head_params(c)[0] for c in checkpoints])
        # Heads on one stream are nearly parallel; only deviations from the ensemble mean separate them.
        outputs -= outputs.mean(axis=0)
        contributions -= contributions.mean(axis=0)
        # Clamped so the merged head stays inside the hull of the buffered heads.
        scoring = replace(state.scoring, clamp_negative=True)
        plan = self._plan(entries, outputs, contributions, scoring)
        return plan.selected_steps, plan.weights, weighted_average_merge(checkpoints, plan.weights)


# Export the plugin instance.
plugin = MosPlugin()
