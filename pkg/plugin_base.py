# plugin_base.py
from helpers import ParameterError


class MergePlugin:
    name = ""
    usage = ""
    description = ""
    # "cli" plugins merge a saved codebook, "sim" plugins drive the simulator loop.
    platforms = []
    required_settings = {}

    # Simulator behaviour
    adapts = True
    start_from = "merged"

    def handle_cli(self, codebook, scoring, policy):
        """Return (MergePlan, merged Checkpoint) for a loaded codebook."""
        raise NotImplementedError

    def sim_start(self, state):
        pass

    def sim_merge(self, state, features):
        """Return (selected_steps, weights, merged Checkpoint) for the current batch."""
        raise NotImplementedError

    def sim_update(self, state, adapted):
        pass

    def check_settings(self, settings):
        missing = [key for key in self.required_settings if settings.get(key) is None]
        if missing:
            raise ParameterError(
                f"method '{self.name}' requires " + ", ".join(f"--{k.replace('_', '-')}" for k in missing)
            )
