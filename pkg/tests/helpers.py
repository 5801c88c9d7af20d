"""Shared fixtures-by-function for the test modules."""
import numpy as np

from spatialsep.autodiff import check_gradients
from spatialsep.config import load_preset
from spatialsep.metrics import pit_loss_tensor
from spatialsep.model import SeparationModel

# Filled by test_acceptance.py, echoed in the terminal summary by conftest.py.
ACCEPTANCE_LINES: list[str] = []


def record_criterion(name: str, ok: bool, detail: str = "") -> bool:
    line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


# One preset per feature configuration.
FEATURE_PRESETS = {
    "encoder": "encoder",
    "ipd": "ipd",
    "mcs": "mcs_256",
    "icd": "icd_init_33",
    "icd_ipd": "icd_plus_ipd",
}


def small_mixture(seconds=0.1, seed=0, channels=6, fs=16000):
    rng = np.random.default_rng(seed)
    n = int(round(seconds * fs))
    mix = rng.standard_normal((channels, n)) * 0.1
    refs = rng.standard_normal((2, n)) * 0.1
    return mix, refs


def generic_point(model, seed=0):
    """Move a fresh model off its symmetric initialization.

    With zero biases/betas the PReLU layers are positively homogeneous and
    the following training-mode batch norm cancels per-channel scale, so
    some gradients are zero up to the norm's epsilon. Finite differences
    cannot resolve those; a random point makes every gradient generic.
    """
    rng = np.random.default_rng(seed + 1000)
    for name, p in model.params.items():
        if name.endswith((".b", ".beta")):
            p.value = 0.1 * rng.standard_normal(p.shape)
        elif name.endswith(".gamma"):
            p.value = rng.uniform(0.5, 1.5, p.shape)
        elif ".prelu" in name:
            p.value = rng.uniform(0.05, 0.5, p.shape)
    return model


def pipeline_gradcheck(preset, seconds=0.1, entries=4, seed=0, config_edit=None):
    """Finite-difference check of the PIT loss w.r.t. every trainable parameter.

    Returns ``{parameter name: max relative error}``.
    """
    cfg = load_preset(preset)
    if config_edit:
        config_edit(cfg)
    model = generic_point(SeparationModel(cfg, seed=seed), seed)
    mix, refs = small_mixture(seconds, seed)
    t_out = model.output_length(mix.shape[1])

    def loss():
        est = model.forward(mix[None], training=True)["estimates"]
        return pit_loss_tensor(est, refs[None, :, :t_out])[0]

    return check_gradients(loss, model.trainable_parameters(), h=1e-5, max_entries=entries, seed=seed)
