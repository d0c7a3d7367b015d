"""ERF-guided attention segmentation laboratory.

Imports are lazy so the CLI can pin BLAS thread counts via environment
variables before numpy loads.
"""

__version__ = "0.1.0"

_EXPORTS = {
    "Tensor": "tensor",
    "Tape": "tensor",
    "ConvSpec": "ops",
    "conv2d": "ops",
    "maxpool2d": "ops",
    "bilinear_upsample": "ops",
    "instance_norm": "ops",
    "grad_check": "gradcheck",
    "ParamStore": "layers",
    "BlockSpec": "layers",
    "init_params": "layers",
    "count_params": "layers",
    "conv_block_forward": "layers",
    "NetworkSpec": "network",
    "FPAConfig": "network",
    "RFNAConfig": "network",
    "build_unet": "network",
    "network_forward": "network",
    "fpa_forward": "network",
    "rfna_forward": "network",
    "LabSpec": "erf",
    "compute_erf": "erf",
    "erf_radius": "erf",
    "compare_erf": "erf",
    "binarize": "metrics",
    "iou": "metrics",
    "hd95": "metrics",
    "fp_fn_rates": "metrics",
    "MetricsReport": "metrics",
    "SyntheticTaskConfig": "synth",
    "gen_synthetic": "synth",
    "augment_hflip": "synth",
    "TrainConfig": "train",
    "dice_loss": "train",
    "adamw_step": "train",
    "train": "train",
    "evaluate": "train",
}


def __getattr__(name):
    if name in _EXPORTS:
        import importlib

        module = importlib.import_module(f".{_EXPORTS[name]}", __name__)
        return getattr(module, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(set(globals()) | set(_EXPORTS))
