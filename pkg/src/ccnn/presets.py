"""Named training presets.

A preset is a nested dict of config sections, every value a string, in
the same shape the CLI reads from INI files. Precedence when training is
preset < config file < --set overrides, so presets only have to carry
sensible starting points.

The geometry and radii here were tuned by hand on the reference tasks;
treat them as baselines, not optima.
"""

import copy

from .errors import ConfigError

PRESETS = {
    # One convex stage for 28x28 grayscale digits.
    "mnist-ccnn1": {
        "optim": {
            "epochs": "10",
            "batch_size": "50",
            "step_size": "1.0",
            "schedule": "inv_sqrt",
            "projection": "nuclear",
        },
        "layer1": {
            "kernel": "gaussian",
            "gamma": "0.2",
            "features": "random",
            "m": "500",
            "r": "16",
            "R": "30",
            "patch_side": "5",
            "stride": "1",
            "pad": "0",
            "pool_side": "2",
            "pool_stride": "2",
            "gcn": "false",
            "lcn": "true",
            "zca": "true",
            "scale": "auto",
        },
    },
    # Two stacked stages for 28x28 grayscale digits.
    "mnist-ccnn2": {
        "optim": {
            "epochs": "10",
            "batch_size": "50",
            "step_size": "1.0",
            "schedule": "inv_sqrt",
            "projection": "nuclear",
        },
        "layer1": {
            "kernel": "gaussian",
            "gamma": "0.2",
            "features": "random",
            "m": "500",
            "r": "16",
            "R": "30",
            "patch_side": "5",
            "stride": "1",
            "pad": "0",
            "pool_side": "2",
            "pool_stride": "2",
            "gcn": "false",
            "lcn": "true",
            "zca": "true",
            "scale": "auto",
        },
        "layer2": {
            "kernel": "gaussian",
            "gamma": "2.0",
            "features": "random",
            "m": "1000",
            "r": "32",
            "R": "60",
            "patch_side": "3",
            "stride": "1",
            "pad": "0",
            "pool_side": "2",
            "pool_stride": "2",
            "gcn": "false",
            "lcn": "true",
            "zca": "true",
            "scale": "auto",
        },
    },
    # Three stacked stages for 32x32 color images, trained on a fixed
    # 24x24 crop.
    "cifar-ccnn": {
        "dataset": {
            "crop": "once:24x24",
        },
        "optim": {
            "epochs": "20",
            "batch_size": "50",
            "step_size": "1.0",
            "schedule": "inv_sqrt",
            "projection": "nuclear",
        },
        "layer1": {
            "kernel": "gaussian",
            "gamma": "1.0",
            "features": "random",
            "m": "2000",
            "r": "32",
            "R": "100",
            "patch_side": "5",
            "stride": "1",
            "pad": "2",
            "pool_side": "3",
            "pool_stride": "2",
            "gcn": "true",
            "lcn": "true",
            "zca": "true",
            "scale": "auto",
        },
        "layer2": {
            "kernel": "gaussian",
            "gamma": "2.0",
            "features": "random",
            "m": "2000",
            "r": "32",
            "R": "100",
            "patch_side": "5",
            "stride": "1",
            "pad": "2",
            "pool_side": "3",
            "pool_stride": "2",
            "gcn": "false",
            "lcn": "true",
            "zca": "true",
            "scale": "auto",
        },
        "layer3": {
            "kernel": "gaussian",
            "gamma": "2.0",
            "features": "random",
            "m": "2000",
            "r": "64",
            "R": "100",
            "patch_side": "3",
            "stride": "1",
            "pad": "1",
            "pool_side": "2",
            "pool_stride": "2",
            "gcn": "false",
            "lcn": "true",
            "zca": "true",
            "scale": "auto",
        },
    },
}


def list_presets() -> list:
    """Preset names in a stable order."""
    return sorted(PRESETS)


def get_preset(name: str) -> dict:
    """A deep copy of the named preset's config sections."""
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(
            f"unknown preset {name!r}; available: {', '.join(list_presets())}"
        ) from None
    return copy.deepcopy(base)
