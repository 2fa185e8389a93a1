"""Finite-difference verification of every trainable component.

Each named check builds one component at tiny dimensions on a batch of
four, defines a smooth scalar objective over it, and compares backward
gradients against central differences. Loss checks let the gradients
flow through the target construction (no detaching): with targets
detached the numeric derivative of the recomputed objective measures a
different quantity than backward deliberately reports, so the detached
path is validated separately by algebraic identity tests instead.
"""
from __future__ import annotations

import numpy as np

from .backbone import ProjectionHead, VisionBackbone, make_prompts
from .dynfilter import FilterGenerator, apply_dynamic_filter
from .eeg import LinearEncoder, Perturbation
from .errors import ConfigError
from .fusion import CrossAttentionFusion
from .losses import infonce, relation_loss, soft_loss, soft_targets
from .tensor import (
    GradCheckReport,
    Parameter,
    Tensor,
    exp,
    grad_check,
    l2_normalize,
    matmul,
    softmax_rows,
    transpose,
)

BATCH = 4
# tau for the loss checks; cold temperatures push softmax entries under
# the KL clamp where the objective has a corner
CHECK_TAU = 0.5


def _param(name: str, array: np.ndarray) -> Parameter:
    return Parameter(name, Tensor(array), group="A")


def check_perturbation(seed: int) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    perturb = Perturbation(channels=3, timesteps=5)
    perturb.gain.value.data += 0.1 * rng.normal(size=(3, 5))
    perturb.offset.value.data += 0.1 * rng.normal(size=(3, 5))
    eeg = Tensor(rng.normal(size=(BATCH, 3, 5)))
    weights = Tensor(rng.normal(size=(BATCH, 3, 5)))

    def loss():
        out = perturb.apply(eeg)
        return (out * out * weights).sum()

    return grad_check(loss, perturb.params())


def check_encoder(seed: int) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    enc = LinearEncoder(channels=3, timesteps=5, dim=6, rng=rng)
    eeg = Tensor(rng.normal(size=(BATCH, 3, 5)))
    target = Tensor(rng.normal(size=(BATCH, 6)))

    def loss():
        diff = enc.encode(eeg) - target
        return (diff * diff).sum()

    return grad_check(loss, enc.params())


def check_filter_generator(seed: int) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    gen = FilterGenerator(fh=3, fw=3, rng=rng)
    images = Tensor(rng.uniform(size=(BATCH, 3, 8, 8)))
    weights = Tensor(rng.normal(size=(BATCH, 3, 3, 3)))

    def loss():
        k = gen.generate(images)
        return (k * k * weights).sum()

    return grad_check(loss, gen.params(), max_entries=25, rng=np.random.default_rng(seed + 1))


def check_dynamic_filter(seed: int) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    images = _param("images", rng.uniform(size=(BATCH, 3, 6, 6)))
    kernels = _param("kernels", 0.3 * rng.normal(size=(BATCH, 3, 3, 3)))

    def loss():
        out = apply_dynamic_filter(images.value, kernels.value)
        return (out * out).sum()

    return grad_check(loss, [images, kernels], max_entries=40, rng=np.random.default_rng(seed + 1))


def check_fusion(seed: int) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    fusion = CrossAttentionFusion(dim=8, heads=2, rng=rng)
    x_orig = _param("x_orig", rng.normal(size=(BATCH, 3, 8)))
    x_filt = _param("x_filt", rng.normal(size=(BATCH, 3, 8)))

    def loss():
        fused = fusion.fuse(x_orig.value, x_filt.value)
        return (fused * fused).sum()

    return grad_check(loss, fusion.params() + [x_orig, x_filt], max_entries=30,
                      rng=np.random.default_rng(seed + 1))


def check_prompts(seed: int) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    bb = VisionBackbone(image_size=8, patch=4, dim=8, layers=1, heads=2, prompt_count=2, rng=rng)
    prompts = make_prompts(2, 8, rng)
    fused = Tensor(rng.normal(size=(BATCH, 4, 8)))

    def loss():
        out = bb.vit_forward(bb.insert_prompts(prompts.value, fused))
        return (out * out).sum()

    return grad_check(loss, [prompts])


def check_projection(seed: int) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    head = ProjectionHead(8, 6, rng)
    z = Tensor(rng.normal(size=(BATCH, 8)))
    target = Tensor(rng.normal(size=(BATCH, 6)))

    def loss():
        diff = head.project(z) - target
        return (diff * diff).sum()

    return grad_check(loss, head.params(), max_entries=30, rng=np.random.default_rng(seed + 1))


def _embedding_params(seed: int):
    rng = np.random.default_rng(seed)
    ze = _param("z_e", rng.normal(size=(BATCH, 6)))
    zi = _param("z_i", rng.normal(size=(BATCH, 6)))
    log_tau = _param("log_tau", np.log(CHECK_TAU))
    return ze, zi, log_tau


def check_loss_clip(seed: int) -> GradCheckReport:
    ze, zi, log_tau = _embedding_params(seed)

    def loss():
        sim = matmul(l2_normalize(ze.value), transpose(l2_normalize(zi.value)))
        return infonce(sim, exp(log_tau.value))

    return grad_check(loss, [ze, zi, log_tau])


def check_loss_soft(seed: int) -> GradCheckReport:
    ze, zi, log_tau = _embedding_params(seed)

    def loss():
        tau = exp(log_tau.value)
        a, b = l2_normalize(ze.value), l2_normalize(zi.value)
        sim = matmul(a, transpose(b))
        t_e, t_i = soft_targets(a, b, tau, beta=0.3, detach=False)
        p_ei = softmax_rows(sim, temperature=tau)
        p_ie = softmax_rows(transpose(sim), temperature=tau)
        return soft_loss(t_e, t_i, p_ei, p_ie)

    return grad_check(loss, [ze, zi, log_tau])


def check_loss_rel(seed: int) -> GradCheckReport:
    ze, zi, log_tau = _embedding_params(seed)

    def loss():
        tau = exp(log_tau.value)
        a, b = l2_normalize(ze.value), l2_normalize(zi.value)
        sim = matmul(a, transpose(b))
        p_ee = softmax_rows(matmul(a, transpose(a)), temperature=tau)
        p_ii = softmax_rows(matmul(b, transpose(b)), temperature=tau)
        p_ei = softmax_rows(sim, temperature=tau)
        p_ie = softmax_rows(transpose(sim), temperature=tau)
        return relation_loss(p_ee, p_ii, p_ei, p_ie)

    return grad_check(loss, [ze, zi, log_tau])


CHECKS = {
    "perturbation": check_perturbation,
    "encoder": check_encoder,
    "filter_generator": check_filter_generator,
    "dynamic_filter": check_dynamic_filter,
    "fusion": check_fusion,
    "prompts": check_prompts,
    "projection": check_projection,
    "loss_clip": check_loss_clip,
    "loss_soft": check_loss_soft,
    "loss_rel": check_loss_rel,
}


def run_checks(names, seed: int = 0) -> dict[str, GradCheckReport]:
    """Run the named checks (all of them for `None`) at one seed."""
    if names is None:
        names = list(CHECKS)
    reports = {}
    for name in names:
        if name not in CHECKS:
            raise ConfigError(f"unknown gradcheck component {name!r}; known: {', '.join(sorted(CHECKS))}")
        reports[name] = CHECKS[name](seed)
    return reports
