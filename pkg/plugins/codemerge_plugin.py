# plugins/codemerge_plugin.py
import logging

from merging import sign_consistent_merge
from plugin_base import MergePlugin
from scoring import plan_from_codebook

logger = logging.getLogger(__name__)


class CodeMergePlugin(MergePlugin):
    name = "codemerge"
    usage = "codemerge merge --codebook INDEX --method codemerge --k 5 --lambda 1e-3 --out MERGED"
    description = "Ranks stored fingerprints by ridge leverage score and sign-consistently merges the top K."
    platforms = ["cli", "sim"]

    def _merge(self, codebook, scoring, policy, rng=None):
        plan = plan_from_codebook(codebook, scoring, rng=rng)
        checkpoints = [codebook.resolve(codebook.find(step)) for step in plan.selected_steps]
        merged = sign_consistent_merge(checkpoints, plan.weights, policy)
        return plan, merged

    def handle_cli(self, codebook, scoring, policy):
        return self._merge(codebook, scoring, policy)

    def sim_merge(self, state, features):
        plan, merged = self._merge(state.codebook, state.scoring, state.policy, rng=state.selection_rng)
        logger.debug(f"Step {state.index + 1}: plan {plan.selected_steps} weights {plan.weights}")
        return plan.selected_steps, plan.weights, merged


# Export the plugin instance.
plugin = CodeMergePlugin()
