# plugins/average_plugin.py
from merging import weighted_average_merge
from plugin_base import MergePlugin
from scoring import MergePlan


class AveragePlugin(MergePlugin):
    name = "average"
    usage = "codemerge merge --codebook INDEX --method average --k 5 --out MERGED"
    description = "Uniform weight average (model soup) of the K most recent checkpoints."
    platforms = ["cli"]

    def handle_cli(self, codebook, scoring, policy):
        entries = codebook.snapshot()[-int(scoring.top_k):]
        weights = [1.0 / len(entries)] * len(entries)
        plan = MergePlan(
            selected_steps=tuple(entry.step for entry in entries),
            raw_scores=tuple(1.0 for _ in entries),
            weights=tuple(weights),
        )
        return plan, weighted_average_merge([codebook.resolve(e) for e in entries], weights)


# Export the plugin instance.
plugin = AveragePlugin()
