# plugins/no_adapt_plugin.py
from plugin_base import MergePlugin


class NoAdaptPlugin(MergePlugin):
    name = "no_adapt"
    description = "Keeps the source head for the whole stream."
    platforms = ["sim"]
    adapts = False

    def sim_merge(self, state, features):
        return (state.source.step,), (1.0,), state.source


# Export the plugin instance.
plugin = NoAdaptPlugin()
