# plugins/naive_sequential_plugin.py
from plugin_base import MergePlugin


class NaiveSequentialPlugin(MergePlugin):
    name = "naive_sequential"
    description = "Plain sequential fine-tuning: every step continues from the previous one."
    platforms = ["sim"]
    start_from = "latest"

    def sim_merge(self, state, features):
        return (state.latest.step,), (1.0,), state.latest


# Export the plugin instance.
plugin = NaiveSequentialPlugin()
