"""Shared heavyweight checks used by both unit and acceptance tests."""

import dataclasses

import numpy as np

from mmfusion.engine import RngStream, Tape, Tensor, bce_loss
from mmfusion.model import ModelConfig, forward, init_params

FD_EPS = 1e-5
FD_TOL = 1e-4

# at T=1 the recurrent LSTM kernels only ever convolve the zero initial
# state, so their gradient is analytically zero and the tape leaves it None
DEAD_AT_T1 = {"radar.lstm1.kh", "radar.lstm2.kh"}


def full_model_fd_check(seed=21, coords_per_tensor=3, eps=FD_EPS, tol=FD_TOL):
    """Finite-difference the BCE loss of the reduced-width model.

    Probes ``coords_per_tensor`` random coordinates of every parameter in
    float64. A coordinate whose +/-eps interval straddles a ReLU kink
    (batch norm amplifies those slope discontinuities) makes the central
    difference invalid at the nominal step; those are re-probed at eps/1000,
    which a genuinely wrong gradient still fails -- float64 cancellation
    noise at a 1e-8 step is ~1e-9 relative, far below the tolerance.

    Returns (worst_rel_err, n_probes, n_kinks).
    """
    cfg = dataclasses.replace(ModelConfig.tiny(), dropout_rate=0.0)
    model = init_params(cfg, RngStream(seed), dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    radar = rng.standard_normal((2, 1, 256, 4))
    depth = rng.standard_normal((2, 8, 16, 1))
    target = Tensor((rng.uniform(size=(2, 8, 16, 1)) > 0.5).astype(np.float64))

    with Tape() as tape:
        out = forward(model, radar, depth, mode="train", update_stats=False)
        loss = bce_loss(out, target)
        tape.backward(loss)
    missing = {k for k, t in model.params.items() if t.grad is None}
    assert missing <= DEAD_AT_T1, f"unexpected missing gradients: {missing - DEAD_AT_T1}"
    grads = {
        k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for k, t in model.params.items()
    }

    def value():
        out = forward(model, radar, depth, mode="train", update_stats=False)
        return float(bce_loss(out, target).data)

    def probe(flat, i, step):
        orig = flat[i]
        flat[i] = orig + step
        fp = value()
        flat[i] = orig - step
        fm = value()
        flat[i] = orig
        return (fp - fm) / (2 * step)

    coord_rng = np.random.default_rng(seed + 2)
    worst, n_probes, n_kinks = 0.0, 0, 0
    for name, t in model.params.items():
        flat = t.data.reshape(-1)
        picks = coord_rng.choice(flat.size, size=min(coords_per_tensor, flat.size),
                                 replace=False)
        for i in picks:
            ana = grads[name].reshape(-1)[i]
            num = probe(flat, i, eps)
            err = abs(ana - num) / max(abs(ana), abs(num), 1.0)
            if err >= tol:
                num = probe(flat, i, eps / 1000)
                err = abs(ana - num) / max(abs(ana), abs(num), 1.0)
                n_kinks += 1
            assert err < tol, f"{name}[{i}]: analytic {ana:.6e} vs fd {num:.6e}"
            worst = max(worst, err)
            n_probes += 1
    return worst, n_probes, n_kinks
