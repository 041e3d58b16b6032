# plugins/ema_plugin.py
import logging

from merging import ema_update, weighted_average_merge
from plugin_base import MergePlugin
from scoring import MergePlan, ema_weights

logger = logging.getLogger(__name__)


class EmaPlugin(MergePlugin):
    name = "ema"
    usage = "codemerge merge --codebook INDEX --method ema --beta 0.99 --out MERGED"
    description = "Mean-teacher exponential moving average over every stored checkpoint."
    platforms = ["cli", "sim"]
    required_settings = {"beta": {"label": "EMA decay", "description": "Decay beta in (0, 1)."}}
    start_from = "latest"

    def handle_cli(self, codebook, scoring, policy):
        entries = codebook.snapshot()
        weights = ema_weights(len(entries) - 1, scoring.ema_beta)
        checkpoints = [codebook.resolve(entry) for entry in entries]
        plan = MergePlan(
            selected_steps=tuple(entry.step for entry in entries),
            raw_scores=tuple(float(w) for w in weights),
            weights=tuple(float(w) for w in weights),
        )
        return plan, weighted_average_merge(checkpoints, weights)

    def sim_start(self, state):
        state.ema = state.source

    def sim_merge(self, state, features):
        steps = tuple(state.codebook.steps)
        return steps, tuple(ema_weights(len(steps) - 1, state.scoring.ema_beta)), state.ema

    def sim_update(self, state, adapted):
        # Teacher follows the student; the student keeps training from its own weights.
        state.ema = ema_update(state.ema, adapted, state.scoring.ema_beta)


# Export the plugin instance.
plugin = EmaPlugin()
