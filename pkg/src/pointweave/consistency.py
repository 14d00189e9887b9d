"""Depth-consistency residual network, its losses, and the training loop.

A 7-frame sequence carries initial depths that disagree across frames
(per-frame scale drift plus noise). A small encoder-decoder net predicts a
bounded residual that corrects the earlier frame of each overlapping pair,
D_i <- D_i + net(D_{i+1}, D_i), and the consistency loss compares each
corrected depth, warped forward along the backward flow F_{i+1=>i}, against
the next frame's depth under occlusion weights w = exp(-alpha*|O_{i+1}-O_hat_i|^2).

Chain order: pairs are processed from the last pair down to the first on a
working copy, so every comparison reads the already-corrected later frame
and the final frame anchors the sequence. Depths are normalized per
sequence by the max valid initial depth (a constant w.r.t. parameters);
the tanh head bounds residuals to HEAD_GAIN depth-range units.

The loss value is reported in meters: sum over the six pairs of weighted
L1 differences divided by the total number of contributing pixels
(valid warp and valid target depth) across all pairs. A pair with no
contributing pixels adds nothing and logs a warning.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .camera import DepthMap, _bilinear_gather, check_color_image, occlusion_weights
from .errors import (
    DegenerateGeometryError,
    DimensionError,
    TrainingError,
    ValidationError,
)

log = logging.getLogger(__name__)

SEQUENCE_LENGTH = 7


# ------------------------------------------------------------- sequences


@dataclass
class TrainingSequence:
    """One 7-frame supervision unit: colors, ground-truth depths, perturbed
    initial depths, backward flows F_{i+1=>i} (flows[i] warps frame i into
    frame i+1's grid), and per-pair visibility truth masks."""

    colors: list
    depth_gt: list
    depth_init: list
    flows: list
    occlusion: list
    rigs: list | None = None
    drift: np.ndarray | None = None
    noise: list | None = None

    def __post_init__(self):
        n = SEQUENCE_LENGTH
        if len(self.colors) != n or len(self.depth_gt) != n or len(self.depth_init) != n:
            raise ValidationError(
                f"a training sequence has exactly {n} frames, got "
                f"{len(self.colors)}/{len(self.depth_gt)}/{len(self.depth_init)}"
            )
        if len(self.flows) != n - 1 or len(self.occlusion) != n - 1:
            raise ValidationError(f"expected {n - 1} flow/occlusion pairs")
        self.colors = [check_color_image(c, f"colors[{i}]") for i, c in enumerate(self.colors)]
        hw = self.colors[0].shape[:2]
        for i in range(n):
            if self.colors[i].shape[:2] != hw:
                raise DimensionError("frame resolutions disagree")
            if self.depth_gt[i].shape != hw or self.depth_init[i].shape != hw:
                raise DimensionError("depth resolution does not match color resolution")
        for i in range(n - 1):
            f = np.asarray(self.flows[i], dtype=np.float64)
            if f.shape != hw + (2,):
                raise DimensionError(f"flows[{i}] must be H x W x 2 matching the frames")
            if not np.all(np.isfinite(f)):
                raise ValidationError(f"flows[{i}] contains non-finite values")
            self.flows[i] = f
            m = np.asarray(self.occlusion[i], dtype=np.float64)
            if m.shape != hw:
                raise DimensionError(f"occlusion[{i}] resolution mismatch")
            self.occlusion[i] = m

    @property
    def resolution(self) -> tuple:
        return self.colors[0].shape[:2]

    def crop(self, top: int, left: int, size: int) -> "TrainingSequence":
        """Axis-aligned crop applied to every frame, flow, and mask. Flow
        displacements are unchanged; taps leaving the window become invalid."""
        h, w = self.resolution
        if top < 0 or left < 0 or top + size > h or left + size > w:
            raise DimensionError(f"crop {size} at ({top}, {left}) exceeds {h}x{w}")
        sl = (slice(top, top + size), slice(left, left + size))
        return TrainingSequence(
            colors=[c[sl] for c in self.colors],
            depth_gt=[DepthMap(d.values[sl], d.valid[sl]) for d in self.depth_gt],
            depth_init=[DepthMap(d.values[sl], d.valid[sl]) for d in self.depth_init],
            flows=[f[sl] for f in self.flows],
            occlusion=[m[sl] for m in self.occlusion],
            rigs=self.rigs,
            drift=self.drift,
            noise=None,
        )


def sequence_scale(seq: TrainingSequence) -> float:
    """Per-sequence normalization constant: the max valid initial depth."""
    best = 0.0
    for d in seq.depth_init:
        if d.valid.any():
            best = max(best, float(d.values[d.valid].max()))
    if best <= 0:
        raise DegenerateGeometryError("sequence has no valid depth to set a scale")
    return best


# ---------------------------------------------------------------- network


def _kaiming(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class DcmNetwork:
    """Residual depth corrector.

    Encoder: two stride-2 3x3 convolutions (2 -> c -> 2c). Trunk: five
    residual blocks at 2c. Decoder: two stride-2 4x4 transposed
    convolutions with skip concatenation (4c -> c, then 2c+2 -> 1).
    Instance normalization and ELU after every layer except the last,
    which is bias-free of normalization and ends in tanh. The final layer
    starts at zero so an untrained network is exactly the identity
    corrector.

    Two constraints shape the last layer's input. Instance-normalized
    features are invariant to a common rescaling of the input depths, but
    the correct residual is proportional to it, so the final concat also
    carries the raw input pair (2x2 mean-pooled to the half-resolution
    grid): the only norm-free layer is the one place absolute depth
    magnitudes can re-enter. And because that layer starts at zero, its
    weights can travel only about lr x iterations under Adam; the constant
    HEAD_GAIN after the tanh sizes the reachable output range so short
    training schedules are not amplitude-limited. The gain is not a
    parameter; it is a fixed output unit. It sits outside the tanh rather
    than inside so the head's higher derivatives stay small, keeping
    finite-difference probes of the loss well conditioned.
    """

    N_RES_BLOCKS = 5
    HEAD_GAIN = 8.0

    def __init__(self, base_channels: int = 16, seed: int = 0):
        if base_channels < 1:
            raise ValidationError(f"base_channels must be >= 1, got {base_channels}")
        self.base_channels = int(base_channels)
        rng = np.random.default_rng(seed)
        c = self.base_channels
        p = OrderedDict()

        # Layers feeding an instance norm carry no bias: the norm subtracts
        # the per-channel mean, so such a bias has exactly zero gradient.
        def conv_p(name, co, ci, k):
            p[f"{name}/w"] = ad.parameter(_kaiming(rng, (co, ci, k, k), ci * k * k))

        def norm_p(name, ch):
            p[f"{name}/g"] = ad.parameter(np.ones(ch))
            p[f"{name}/b"] = ad.parameter(np.zeros(ch))

        conv_p("enc1", c, 2, 3)
        norm_p("enc1/n", c)
        conv_p("enc2", 2 * c, c, 3)
        norm_p("enc2/n", 2 * c)
        for k in range(self.N_RES_BLOCKS):
            conv_p(f"res{k}/c1", 2 * c, 2 * c, 3)
            norm_p(f"res{k}/n1", 2 * c)
            conv_p(f"res{k}/c2", 2 * c, 2 * c, 3)
            norm_p(f"res{k}/n2", 2 * c)
        p["dec1/w"] = ad.parameter(_kaiming(rng, (4 * c, c, 4, 4), 4 * c * 16))
        norm_p("dec1/n", c)
        p["dec2/w"] = ad.parameter(np.zeros((2 * c + 2, 1, 4, 4)))
        p["dec2/b"] = ad.parameter(np.zeros(1))
        self.params = p
        pool = np.zeros((2, 2, 2, 2))
        pool[0, 0] = pool[1, 1] = 0.25
        self._pool_w = pool

    # parameter plumbing -------------------------------------------------

    def parameters(self):
        return list(self.params.items())

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def state_entries(self):
        return [(name, t.data.copy()) for name, t in self.params.items()]

    def load_state(self, entries) -> None:
        got = OrderedDict((name, np.asarray(a, dtype=np.float64)) for name, a in entries)
        if list(got) != list(self.params):
            raise ValidationError("checkpoint parameter names do not match this architecture")
        for name, a in got.items():
            if a.shape != self.params[name].data.shape:
                raise ValidationError(
                    f"checkpoint entry {name!r} has shape {a.shape}, expected {self.params[name].data.shape}"
                )
            self.params[name].data = a.copy()

    # forward ------------------------------------------------------------

    def forward(self, x) -> ad.Tensor:
        """x: Tensor (N, 2, H, W) of normalized depths, H and W multiples
        of 4. Returns (N, 1, H, W) residual in normalized units, bounded
        by +/-HEAD_GAIN."""
        n, ch, h, w = x.data.shape
        if ch != 2:
            raise DimensionError(f"expected 2 input channels, got {ch}")
        if h % 4 or w % 4 or h < 4 or w < 4:
            raise DimensionError(f"input size {h}x{w} must be a positive multiple of 4")
        p = self.params

        def block(t, name, stride):
            t = ad.conv2d(t, p[f"{name}/w"], stride=stride, pad=1)
            return ad.elu(ad.instance_norm(t, p[f"{name}/n/g"], p[f"{name}/n/b"]))

        h1 = block(x, "enc1", 2)
        h2 = block(h1, "enc2", 2)
        t = h2
        for k in range(self.N_RES_BLOCKS):
            r = ad.conv2d(t, p[f"res{k}/c1/w"], stride=1, pad=1)
            r = ad.elu(ad.instance_norm(r, p[f"res{k}/n1/g"], p[f"res{k}/n1/b"]))
            r = ad.conv2d(r, p[f"res{k}/c2/w"], stride=1, pad=1)
            r = ad.instance_norm(r, p[f"res{k}/n2/g"], p[f"res{k}/n2/b"])
            t = ad.add(t, r)
        d1 = ad.conv_transpose2d(ad.concat([t, h2], axis=1), p["dec1/w"], stride=2, pad=1)
        d1 = ad.elu(ad.instance_norm(d1, p["dec1/n/g"], p["dec1/n/b"]))
        raw_half = ad.conv2d(x, ad.constant(self._pool_w), stride=2, pad=0)
        out = ad.conv_transpose2d(
            ad.concat([d1, h1, raw_half], axis=1), p["dec2/w"], p["dec2/b"], stride=2, pad=1
        )
        return ad.scale(ad.tanh(out), self.HEAD_GAIN)


def _pair_scale(d_next: DepthMap, d_prev: DepthMap) -> float:
    m = 0.0
    for d in (d_next, d_prev):
        if d.valid.any():
            m = max(m, float(d.values[d.valid].max()))
    return m if m > 0 else 1.0


def dcm_forward(net: DcmNetwork, d_next: DepthMap, d_prev: DepthMap, scale: float | None = None) -> ad.Tensor:
    """Residual (1, 1, H, W) in meters for correcting d_prev toward d_next.

    `scale` is the normalization constant; callers working on a sequence
    pass sequence_scale so every pair shares one unit. Bounded by the
    tanh head to [-HEAD_GAIN * scale, HEAD_GAIN * scale]."""
    if d_next.shape != d_prev.shape:
        raise DimensionError(f"depth shapes {d_next.shape} / {d_prev.shape} disagree")
    if scale is None:
        scale = _pair_scale(d_next, d_prev)
    if not (np.isfinite(scale) and scale > 0):
        raise ValidationError(f"scale must be a positive finite number, got {scale}")
    x = ad.constant(np.stack([d_next.values / scale, d_prev.values / scale])[None])
    return ad.scale(net.forward(x), float(scale))


def apply_dcm(net: DcmNetwork, d_next: DepthMap, d_prev: DepthMap, scale: float | None = None) -> DepthMap:
    """Corrected depth d_prev + residual. Valid where both inputs are valid
    and the corrected value stayed positive (the clamp invalidates rather
    than pins, so downstream consumers never see a fabricated epsilon)."""
    with ad.no_grad():
        res = dcm_forward(net, d_next, d_prev, scale).data[0, 0]
    updated = d_prev.values + res
    valid = d_prev.valid & d_next.valid & (updated > 0)
    return DepthMap(np.where(valid, updated, 0.0), valid)


# -------------------------------------------------------- loss machinery


def _warp_taps(flow: np.ndarray, src_valid: np.ndarray):
    """Bilinear tap table for flow warping, matching warp_by_flow exactly:
    returns (idx (4, P), wts (4, P), ok (H, W)). Zero-weight taps are inert;
    any live tap out of bounds or invalid kills the output pixel."""
    h, w = flow.shape[:2]
    vv, uu = np.mgrid[0:h, 0:w]
    cu = (uu + flow[..., 0]).ravel()
    cv = (vv + flow[..., 1]).ravel()
    j0 = np.floor(cu)
    i0 = np.floor(cv)
    fu = cu - j0
    fv = cv - i0
    j0 = j0.astype(np.int64)
    i0 = i0.astype(np.int64)
    ok = np.ones(h * w, dtype=bool)
    idx = np.empty((4, h * w), dtype=np.int64)
    wts = np.empty((4, h * w))
    taps = ((0, 0, (1 - fv) * (1 - fu)), (0, 1, (1 - fv) * fu), (1, 0, fv * (1 - fu)), (1, 1, fv * fu))
    flat_valid = src_valid.ravel()
    for t, (di, dj, wt) in enumerate(taps):
        ii, jj = i0 + di, j0 + dj
        inb = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w)
        live = wt > 0
        flat = np.clip(ii, 0, h - 1) * w + np.clip(jj, 0, w - 1)
        ok &= ~live | (inb & flat_valid[flat])
        idx[t] = flat
        wts[t] = np.where(live & inb, wt, 0.0)
    return idx, wts, ok.reshape(h, w)


class ChainBatch:
    """Precomputed constants of the sequential pair loss for one batch:
    tap tables, occlusion weights, contributing-pixel normalization. None
    of these depend on parameters, so repeated loss builds (training steps
    on the same crops, finite-difference probes) reuse them.

    norm_depth: (B, 7, H, W) initial depths already divided by scales;
    valid: (B, 7, H, W) bool; colors: (B, 7, H, W, 3); flows: (B, 6, H, W, 2);
    scales: (B,). Per-sample normalization (meters per contributing pixel,
    averaged over the batch) is folded into the constant weight maps, so
    the graph that loss() builds is a plain weighted sum.
    """

    def __init__(self, norm_depth, valid, colors, flows, scales, alpha: float):
        b, nf, h, w = norm_depth.shape
        n_pairs = nf - 1
        self.norm_depth = norm_depth
        self.n_frames = nf
        self.idx = np.empty((n_pairs, b, 4, h * w), dtype=np.int64)
        self.wts = np.empty((n_pairs, b, 4, h * w))
        mask = np.empty((n_pairs, b, h, w), dtype=bool)
        wcol = np.empty((n_pairs, b, h, w))
        vvg, uug = np.mgrid[0:h, 0:w]
        for i in range(n_pairs):
            for s in range(b):
                idx, wts, ok = _warp_taps(flows[s, i], valid[s, i])
                self.idx[i, s] = idx
                self.wts[i, s] = wts
                mask[i, s] = ok & valid[s, i + 1]
                o_hat, _ = _bilinear_gather(
                    colors[s, i], None, uug + flows[s, i, ..., 0], vvg + flows[s, i, ..., 1]
                )
                wcol[i, s] = occlusion_weights(colors[s, i + 1], np.clip(o_hat, 0.0, 1.0), alpha)

        counts = mask.reshape(n_pairs, b, -1).sum(axis=2)
        denom = counts.sum(axis=0).astype(np.float64)
        self.empty_pairs = 0
        for i in range(n_pairs):
            for s in range(b):
                if counts[i, s] == 0:
                    self.empty_pairs += 1
                    log.warning("consistency pair %d of sample %d has no contributing pixels", i, s)
        self.contributing = int(denom.sum())
        safe_denom = np.where(denom > 0, denom, 1.0)
        self.weights = [
            ad.constant((wcol[i] * mask[i] * (scales / safe_denom)[:, None, None] / b)[:, None])
            for i in range(n_pairs)
        ]

    def loss(self, net: DcmNetwork):
        """Build the correction-chain graph: (loss Tensor, corrected work list)."""
        work = [ad.constant(self.norm_depth[:, i][:, None]) for i in range(self.n_frames)]
        total = None
        for i in range(self.n_frames - 2, -1, -1):
            res = net.forward(ad.concat([work[i + 1], work[i]], axis=1))
            work[i] = ad.add(work[i], res)
            warped = ad.warp_gather(work[i], self.idx[i], self.wts[i])
            diff = ad.absolute(ad.sub(work[i + 1], warped))
            term = ad.sum_all(ad.mul(diff, self.weights[i]))
            total = term if total is None else ad.add(total, term)
        return total, work


def _chain_loss(net: DcmNetwork, norm_depth, valid, colors, flows, scales, alpha: float):
    batch = ChainBatch(norm_depth, valid, colors, flows, scales, alpha)
    total, work = batch.loss(net)
    return total, work, {"contributing": batch.contributing, "empty_pairs": batch.empty_pairs}


def _sequence_arrays(seq: TrainingSequence):
    depth = np.stack([d.values for d in seq.depth_init])[None]
    valid = np.stack([d.valid for d in seq.depth_init])[None]
    colors = np.stack(seq.colors)[None]
    flows = np.stack(seq.flows)[None]
    return depth, valid, colors, flows


def consistency_loss(seq: TrainingSequence, net: DcmNetwork, alpha: float = 50.0) -> float:
    """Sequential-correction consistency loss of the sequence in meters
    (weighted L1 per contributing pixel; see the module docstring)."""
    s = sequence_scale(seq)
    depth, valid, colors, flows = _sequence_arrays(seq)
    with ad.no_grad():
        loss, _, _ = _chain_loss(net, depth / s, valid, colors, flows, np.array([s]), alpha)
    return float(loss.data)


def correct_sequence(seq: TrainingSequence, net: DcmNetwork, alpha: float = 50.0) -> list:
    """Depths after running the correction chain, in meters.

    Frames 0..5 receive their chained residuals (valid where the initial
    depth was valid and the corrected value stayed positive); the final
    frame anchors the chain and passes through untouched."""
    s = sequence_scale(seq)
    depth, valid, colors, flows = _sequence_arrays(seq)
    with ad.no_grad():
        _, work, _ = _chain_loss(net, depth / s, valid, colors, flows, np.array([s]), alpha)
    out = []
    for i in range(SEQUENCE_LENGTH - 1):
        vals = work[i].data[0, 0] * s
        ok = seq.depth_init[i].valid & (vals > 0)
        out.append(DepthMap(np.where(ok, vals, 0.0), ok))
    out.append(seq.depth_init[-1].copy())
    return out


def depth_domain_loss(pred: DepthMap, gt: DepthMap) -> float:
    """Scale-and-shift-invariant MSE: least-squares fit a*pred + b to gt
    over jointly valid pixels, then mean squared residual."""
    if pred.shape != gt.shape:
        raise DimensionError(f"depth shapes {pred.shape} / {gt.shape} disagree")
    m = pred.valid & gt.valid
    n = int(m.sum())
    if n < 2:
        raise DegenerateGeometryError(f"need >= 2 jointly valid pixels for an affine fit, got {n}")
    p = pred.values[m]
    g = gt.values[m]
    a, b = _affine_fit(p, g)
    r = a * p + b - g
    return float(np.mean(r * r))


def _affine_fit(p: np.ndarray, g: np.ndarray):
    A = np.stack([p, np.ones_like(p)], axis=1)
    coef, *_ = np.linalg.lstsq(A, g, rcond=None)
    return float(coef[0]), float(coef[1])


# ----------------------------------------------------------------- Adam


class Adam:
    """Standard Adam with bias correction. A zero gradient from a fresh
    state leaves parameters bit-identical."""

    def __init__(self, params, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in self.params}
        self.v = {name: np.zeros_like(t.data) for name, t in self.params}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * (g * g)
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ------------------------------------------------------------- training


@dataclass
class TrainConfig:
    """Desk-scale defaults; paper() gives the full-size recipe
    (20k iterations at 384 crops)."""

    iterations: int = 500
    batch_size: int = 4
    crop: int = 64
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    lambda_consistency: float = 1.0
    lambda_depth: float = 0.1
    alpha: float = 50.0
    base_channels: int = 8
    seed: int = 0
    log_every: int = 50

    @classmethod
    def paper(cls) -> "TrainConfig":
        return cls(iterations=20000, crop=384, base_channels=16)


def train_dcm(dataset, config: TrainConfig, net: DcmNetwork | None = None, on_iteration=None) -> DcmNetwork:
    """Adam-train the corrector on random aligned crops of the dataset.

    Deterministic for a fixed seed. A non-finite loss aborts with a
    TrainingError carrying the iteration index and the parameters of the
    most recent finite-loss iteration. on_iteration, when given, observes
    one record dict per step (iteration, loss, consistency, depth); the
    same records go to the module logger every log_every steps.
    """
    if not dataset:
        raise ValidationError("training dataset is empty")
    if config.crop % 4 or config.crop < 4:
        raise DimensionError(f"crop size {config.crop} must be a positive multiple of 4")
    for seq in dataset:
        h, w = seq.resolution
        if config.crop > h or config.crop > w:
            raise DimensionError(f"crop {config.crop} exceeds sequence resolution {h}x{w}")
    rng = np.random.default_rng(config.seed)
    if net is None:
        net = DcmNetwork(config.base_channels, seed=int(rng.integers(2**31)))
    opt = Adam(net.parameters(), lr=config.lr, beta1=config.beta1, beta2=config.beta2)
    scales = [sequence_scale(s) for s in dataset]
    last_good = net.state_entries()
    cs = config.crop

    for it in range(config.iterations):
        batch_depth, batch_valid, batch_col, batch_flow, batch_scale = [], [], [], [], []
        batch_gt, batch_gtv = [], []
        for _ in range(config.batch_size):
            si = int(rng.integers(len(dataset)))
            seq = dataset[si]
            h, w = seq.resolution
            top = int(rng.integers(h - cs + 1))
            left = int(rng.integers(w - cs + 1))
            c = seq.crop(top, left, cs)
            batch_depth.append(np.stack([d.values for d in c.depth_init]))
            batch_valid.append(np.stack([d.valid for d in c.depth_init]))
            batch_col.append(np.stack(c.colors))
            batch_flow.append(np.stack(c.flows))
            batch_scale.append(scales[si])
            batch_gt.append(np.stack([d.values for d in c.depth_gt]))
            batch_gtv.append(np.stack([d.valid for d in c.depth_gt]))
        sc = np.array(batch_scale)
        depth = np.stack(batch_depth) / sc[:, None, None, None]
        valid = np.stack(batch_valid)
        gt_vals = np.stack(batch_gt)
        gt_valid = np.stack(batch_gtv)

        net.zero_grad()
        lc, work, _ = _chain_loss(net, depth, valid, np.stack(batch_col), np.stack(batch_flow), sc, config.alpha)
        ld = _depth_domain_graph(work, gt_vals, gt_valid, valid, sc)
        loss = ad.add(ad.scale(lc, config.lambda_consistency), ad.scale(ld, config.lambda_depth))
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(
                f"non-finite training loss at iteration {it}", iteration=it, checkpoint=last_good
            )
        last_good = net.state_entries()
        loss.backward()
        opt.step()
        record = {"iteration": it, "loss": value, "consistency": float(lc.data), "depth": float(ld.data)}
        if on_iteration is not None:
            on_iteration(record)
        if config.log_every and it % config.log_every == 0:
            log.info("iter %5d  loss %.6f  (consistency %.6f, depth %.6f)", it, value, float(lc.data), float(ld.data))
    return net


def _depth_domain_graph(work, gt_vals, gt_valid, init_valid, scales) -> ad.Tensor:
    """Scale-shift-invariant MSE of the corrected (normalized) depths
    against ground truth, averaged over frames and batch. The per-frame
    affine coefficients are solved in closed form from the current values
    and treated as constants: at the optimum the partials w.r.t. (a, b)
    vanish, so the parameter gradient is unaffected."""
    b, nf = gt_vals.shape[:2]
    n_corrected = nf - 1  # the last frame anchors the chain and is never updated
    total = None
    terms = 0
    for i in range(n_corrected):
        pred = work[i]
        mask = gt_valid[:, i] & init_valid[:, i]
        A = np.zeros((b, 1) + mask.shape[1:])
        G = np.zeros_like(A)
        W = np.zeros_like(A)
        frame_terms = 0
        for s in range(b):
            n = int(mask[s].sum())
            if n < 2:
                continue
            p = pred.data[s, 0][mask[s]]
            g = gt_vals[s, i][mask[s]] / scales[s]
            a, off = _affine_fit(p, g)
            A[s, 0] = np.where(mask[s], a, 0.0)
            G[s, 0] = np.where(mask[s], gt_vals[s, i] / scales[s] - off, 0.0)
            W[s, 0] = mask[s] / n
            frame_terms += 1
        if frame_terms == 0:
            continue
        terms += frame_terms
        diff = ad.sub(ad.mul(pred, ad.constant(A)), ad.constant(G))
        term = ad.sum_all(ad.mul(ad.square(diff), ad.constant(W)))
        total = term if total is None else ad.add(total, term)
    if total is None:
        return ad.constant(np.zeros(()))
    return ad.scale(total, 1.0 / terms)


# ------------------------------------------------------------ gradients


def grad_check(net: DcmNetwork, inputs, loss_fn, h: float = 1e-4) -> float:
    """Max over parameters of the relative disagreement between the tape
    gradient and a central finite difference, one parameter tensor at a
    time: ||analytic - numeric||_2 / max(||analytic||_2, ||numeric||_2,
    1e-12). Every element is probed; comparing per tensor rather than per
    element keeps the check meaningful on elements whose true gradient
    happens to be orders of magnitude below their tensor's scale, where a
    pointwise quotient measures only the finite-difference noise floor."""
    net.zero_grad()
    loss = loss_fn(net, inputs)
    loss.backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in net.parameters()}
    worst = 0.0
    for name, t in net.parameters():
        flat = t.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        gn = np.empty_like(ga)
        for k in range(flat.size):
            keep = flat[k]
            flat[k] = keep + h
            with ad.no_grad():
                up = loss_fn(net, inputs).item()
            flat[k] = keep - h
            with ad.no_grad():
                dn = loss_fn(net, inputs).item()
            flat[k] = keep
            gn[k] = (up - dn) / (2 * h)
        na, nn = np.linalg.norm(ga), np.linalg.norm(gn)
        err = np.linalg.norm(ga - gn) / max(na, nn, 1e-12)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------- checkpoints


def save_network(path, net: DcmNetwork) -> None:
    from .formats import DCM_MAGIC, write_container

    entries = [("meta/base_channels", np.array([net.base_channels], dtype=np.float64))]
    entries.extend(net.state_entries())
    write_container(path, DCM_MAGIC, entries)


def load_network(path) -> DcmNetwork:
    from .formats import DCM_MAGIC, read_container
    from .errors import FormatError

    entries = read_container(path, DCM_MAGIC)
    if not entries or entries[0][0] != "meta/base_channels":
        raise FormatError("checkpoint is missing its meta/base_channels entry")
    c = int(entries[0][1].reshape(-1)[0])
    net = DcmNetwork(c, seed=0)
    try:
        net.load_state(entries[1:])
    except ValidationError as exc:
        raise FormatError(str(exc)) from exc
    return net
