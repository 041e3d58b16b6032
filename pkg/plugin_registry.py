from plugins.codemerge_plugin import plugin as codemerge_plugin
from plugins.ema_plugin import plugin as ema_plugin
from plugins.mos_plugin import plugin as mos_plugin
from plugins.average_plugin import plugin as average_plugin
from plugins.no_adapt_plugin import plugin as no_adapt_plugin
from plugins.naive_sequential_plugin import plugin as naive_sequential_plugin

plugin_registry = {
    codemerge_plugin.name: codemerge_plugin,
    ema_plugin.name: ema_plugin,
    mos_plugin.name: mos_plugin,
    average_plugin.name: average_plugin,
    no_adapt_plugin.name: no_adapt_plugin,
    naive_sequential_plugin.name: naive_sequential_plugin,
}


def plugins_for(platform):
    return [name for name, plugin in plugin_registry.items() if platform in plugin.platforms]
