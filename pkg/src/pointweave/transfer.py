"""Toy denoising UNet with recordable and injectable attention.

The point is the mechanism, not image quality: a small epsilon-predicting
UNet (two downsampling blocks, bottleneck, two upsampling blocks; every
block is residual-conv + single-head self-attention + cross-attention to a
conditioning vector) runs a deterministic DDIM schedule. One run records
every self-attention map and one designated block's residual feature into
a FeatureBank; a second run can then consume the bank, replacing its own
self-attention maps and that residual feature while cross-attention still
reads its own conditioning. Injected attention bypasses the softmax path
entirely: the layer output becomes bank_A @ V of the current values.

Weights are random but fixed by seed; everything is float64 numpy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ValidationError

BLOCK_NAMES = ("down1", "down2", "mid", "up1", "up2")
_EMB_DIM = 8


def self_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, d: int):
    """Single-head scaled dot-product attention.

    attn = row-softmax(q k^T / sqrt(d)), features = attn v. Rows of attn
    sum to 1 by construction (softmax over finite logits).
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if not (isinstance(d, (int, np.integer)) and d > 0):
        raise ValidationError(f"attention dim must be a positive integer, got {d!r}")
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError("q, k, v must all be 2-D token matrices")
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"q/k feature dims disagree: {q.shape[1]} vs {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"k/v token counts disagree: {k.shape[0]} vs {v.shape[0]}")
    logits = q @ k.T / np.sqrt(float(d))
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    attn = e / e.sum(axis=1, keepdims=True)
    return attn @ v, attn


@dataclass
class FeatureBank:
    """Recorded self-attention maps and the designated residual feature.

    attn[(step, block)] is the (tokens x tokens) map of that block at that
    schedule position (step 0 = first denoising step, the largest t);
    residual[step] is the designated block's residual output (C, H, W).
    """

    steps: int
    attn: dict
    residual: dict

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError(f"bank needs >= 1 steps, got {self.steps}")
        for s in range(self.steps):
            if s not in self.residual:
                raise ValidationError(f"bank is missing the residual feature for step {s}")
            for name in BLOCK_NAMES:
                if (s, name) not in self.attn:
                    raise ValidationError(f"bank is missing attention for step {s}, block {name!r}")
        for (s, name), a in self.attn.items():
            a = np.asarray(a, dtype=np.float64)
            if a.ndim != 2 or a.shape[0] != a.shape[1]:
                raise DimensionError(f"attention for step {s}, block {name!r} is not square")
            bad = np.abs(a.sum(axis=1) - 1.0) > 1e-6
            if np.any(bad):
                raise ValidationError(
                    f"attention rows of step {s}, block {name!r} do not sum to 1 within 1e-6"
                )
            self.attn[(s, name)] = a

    def zeroed_residual(self) -> "FeatureBank":
        """Copy with every stored residual feature zeroed (diagnostic use)."""
        return FeatureBank(self.steps, dict(self.attn), {s: np.zeros_like(r) for s, r in self.residual.items()})


def save_bank(path, bank: FeatureBank) -> None:
    from .formats import BANK_MAGIC, write_container

    entries = []
    for s in range(bank.steps):
        for name in BLOCK_NAMES:
            entries.append((f"t{s:04d}/{name}/attn", bank.attn[(s, name)]))
        entries.append((f"t{s:04d}/residual", bank.residual[s]))
    write_container(path, BANK_MAGIC, entries)


def load_bank(path) -> FeatureBank:
    from .errors import FormatError
    from .formats import BANK_MAGIC, read_container

    attn, residual = {}, {}
    for name, data in read_container(path, BANK_MAGIC):
        parts = name.split("/")
        if len(parts) == 3 and parts[0].startswith("t") and parts[2] == "attn":
            attn[(int(parts[0][1:]), parts[1])] = data
        elif len(parts) == 2 and parts[0].startswith("t") and parts[1] == "residual":
            residual[int(parts[0][1:])] = data
        else:
            raise FormatError(f"unrecognized feature-bank entry {name!r}")
    if not residual:
        raise FormatError("feature bank holds no residual entries")
    try:
        return FeatureBank(steps=max(residual) + 1, attn=attn, residual=residual)
    except (ValidationError, DimensionError) as exc:
        raise FormatError(str(exc)) from exc


def _timestep_embedding(t: int, steps: int) -> np.ndarray:
    """Sin/cos features of the normalized schedule position."""
    half = _EMB_DIM // 2
    freqs = np.exp(np.linspace(0.0, np.log(steps + 9.0), half))
    x = (t / max(steps - 1, 1)) * freqs
    return np.concatenate([np.sin(x), np.cos(x)])


def _conv3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3x3 stride-1 zero-padded convolution; x (C, H, W), w (O, C, 3, 3)."""
    c, h, wd = x.shape
    xp = np.zeros((c, h + 2, wd + 2))
    xp[:, 1:-1, 1:-1] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (h, wd), axis=(1, 2))  # (C,3,3,H,W)
    return np.einsum("cijhw,ocij->ohw", win, w) + b[:, None, None]


class ToyUNet:
    """Epsilon predictor over small latents.

    Spatial plan for a `latent`-sized input (latent a multiple of 4,
    at most 16): blocks run at latent, latent/2, latent/4, latent/2,
    latent on widths base, 2*base, 2*base, 2*base, base with skip
    concatenations on the upsampling side. Conditioning enters every
    block through cross-attention tokens projected from the vector.
    """

    def __init__(
        self,
        in_channels: int = 3,
        base: int = 16,
        latent: int = 16,
        cond_dim: int = 8,
        n_cond_tokens: int = 4,
        attn_dim: int = 16,
        inject_block: str = "up2",
        seed: int = 0,
    ):
        if latent % 4 or latent < 4 or latent > 16:
            raise ValidationError(f"latent size must be a multiple of 4 in [4, 16], got {latent}")
        if base < 1 or 2 * base > 32:
            raise ValidationError(f"base width must keep channels <= 32, got {base}")
        if inject_block not in BLOCK_NAMES:
            raise ValidationError(f"inject_block must be one of {BLOCK_NAMES}, got {inject_block!r}")
        self.in_channels = in_channels
        self.base = base
        self.latent = latent
        self.cond_dim = cond_dim
        self.n_cond_tokens = n_cond_tokens
        self.attn_dim = attn_dim
        self.inject_block = inject_block
        rng = np.random.default_rng(seed)

        def mat(*shape):
            return rng.normal(0.0, 1.0 / np.sqrt(shape[-1]), size=shape)

        def conv_w(o, c):
            return rng.normal(0.0, 1.0 / np.sqrt(9 * c), size=(o, c, 3, 3))

        b, dk = base, attn_dim
        self.w = {"in/w": conv_w(b, in_channels), "in/b": np.zeros(b)}
        widths = {"down1": b, "down2": 2 * b, "mid": 2 * b, "up1": 2 * b, "up2": b}
        self.widths = widths
        for name, ch in widths.items():
            w = self.w
            w[f"{name}/c1/w"] = conv_w(ch, ch)
            w[f"{name}/c1/b"] = np.zeros(ch)
            w[f"{name}/c2/w"] = conv_w(ch, ch)
            w[f"{name}/c2/b"] = np.zeros(ch)
            w[f"{name}/temb"] = mat(ch, _EMB_DIM)
            # attention output projections start small so the residual
            # stream stays O(1) through ten attention additions
            w[f"{name}/sa/q"] = mat(ch, dk)
            w[f"{name}/sa/k"] = mat(ch, dk)
            w[f"{name}/sa/v"] = mat(ch, dk)
            w[f"{name}/sa/o"] = 0.3 * mat(dk, ch)
            w[f"{name}/ca/q"] = mat(ch, dk)
            w[f"{name}/ca/k"] = mat(n_cond_tokens * dk, cond_dim)
            w[f"{name}/ca/v"] = mat(n_cond_tokens * dk, cond_dim)
            w[f"{name}/ca/o"] = 0.3 * mat(dk, ch)
        self.w["proj1/w"] = mat(2 * b, b)  # after pooling down1
        self.w["proj_up1/w"] = mat(2 * b, 4 * b)  # merge upsampled mid + skip2
        self.w["proj_up2/w"] = mat(b, 3 * b)  # merge upsampled up1 + skip1
        self.w["out/w"] = conv_w(in_channels, b)
        self.w["out/b"] = np.zeros(in_channels)

    # ------------------------------------------------------------- blocks

    def _block(self, name, h, emb, cond, inject_attn, inject_res, record, trace):
        w = self.w
        r = _conv3(h, w[f"{name}/c1/w"], w[f"{name}/c1/b"])
        r = r + (w[f"{name}/temb"] @ emb)[:, None, None]
        r = np.where(r > 0, r, np.expm1(r))  # elu
        r = _conv3(r, w[f"{name}/c2/w"], w[f"{name}/c2/b"])
        f = h + r
        if inject_res is not None:
            if inject_res.shape != f.shape:
                raise DimensionError(
                    f"injected residual shape {inject_res.shape} != block output {f.shape}"
                )
            f = inject_res
        if record is not None and name == self.inject_block:
            record.residual[record._step] = f.copy()

        ch, hh, ww = f.shape
        tokens = f.reshape(ch, hh * ww).T
        q, k, v = tokens @ w[f"{name}/sa/q"], tokens @ w[f"{name}/sa/k"], tokens @ w[f"{name}/sa/v"]
        if inject_attn is None:
            feats, attn = self_attention(q, k, v, self.attn_dim)
        else:
            attn = inject_attn
            if attn.shape != (hh * ww, hh * ww):
                raise DimensionError(
                    f"injected attention {attn.shape} does not fit {hh * ww} tokens of block {name!r}"
                )
            feats = attn @ v
        if record is not None:
            record.attn[(record._step, name)] = attn.copy()
        h2 = f + (feats @ w[f"{name}/sa/o"]).T.reshape(ch, hh, ww)

        kc = (w[f"{name}/ca/k"] @ cond).reshape(self.n_cond_tokens, self.attn_dim)
        vc = (w[f"{name}/ca/v"] @ cond).reshape(self.n_cond_tokens, self.attn_dim)
        qc = h2.reshape(ch, hh * ww).T @ w[f"{name}/ca/q"]
        cfeats, cattn = self_attention(qc, kc, vc, self.attn_dim)
        h3 = h2 + (cfeats @ w[f"{name}/ca/o"]).T.reshape(ch, hh, ww)
        if trace is not None:
            trace[name] = {
                "residual": f.copy(),
                "self_attn": attn.copy(),
                "self_values": v.copy(),
                "post_self": h2.copy(),
                "cross_attn": cattn.copy(),
                "output": h3.copy(),
            }
        return h3

    @staticmethod
    def _pool(h):
        c, hh, ww = h.shape
        return h.reshape(c, hh // 2, 2, ww // 2, 2).mean(axis=(2, 4))

    @staticmethod
    def _up(h):
        return h.repeat(2, axis=1).repeat(2, axis=2)

    def forward(self, x, cond, t, steps, bank=None, inject_now=False, record=None, trace=None):
        """Predict epsilon for latent x at schedule position t.

        bank + inject_now replace every block's self-attention map and the
        designated block's residual feature for this step; record, when
        given, is a bank under construction (its _step names the slot)."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.in_channels, self.latent, self.latent):
            raise DimensionError(
                f"latent shape {x.shape} != ({self.in_channels}, {self.latent}, {self.latent})"
            )
        cond = np.asarray(cond, dtype=np.float64).reshape(-1)
        if cond.shape != (self.cond_dim,):
            raise DimensionError(f"conditioning length {cond.size} != {self.cond_dim}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(cond))):
            raise ValidationError("latent and conditioning must be finite")
        emb = _timestep_embedding(t, steps)
        step = record._step if record is not None else getattr(bank, "_step", None)

        def picks(name):
            if bank is not None and inject_now:
                return bank.attn[(step, name)], (
                    bank.residual[step] if name == self.inject_block else None
                )
            return None, None

        w = self.w
        h = _conv3(x, w["in/w"], w["in/b"])
        h = self._block("down1", h, emb, cond, *picks("down1"), record, trace)
        skip1 = h
        h = np.einsum("oc,chw->ohw", w["proj1/w"], self._pool(h))
        h = self._block("down2", h, emb, cond, *picks("down2"), record, trace)
        skip2 = h
        h = self._pool(h)
        h = self._block("mid", h, emb, cond, *picks("mid"), record, trace)
        h = np.concatenate([self._up(h), skip2], axis=0)
        h = np.einsum("oc,chw->ohw", w["proj_up1/w"], h)
        h = self._block("up1", h, emb, cond, *picks("up1"), record, trace)
        h = np.concatenate([self._up(h), skip1], axis=0)
        h = np.einsum("oc,chw->ohw", w["proj_up2/w"], h)
        h = self._block("up2", h, emb, cond, *picks("up2"), record, trace)
        return _conv3(h, w["out/w"], w["out/b"])


def _schedule(steps: int):
    if steps < 1:
        raise ValidationError(f"need >= 1 denoising steps, got {steps}")
    betas = np.linspace(1e-4, 0.02, steps)
    return np.cumprod(1.0 - betas)


def _denoise_loop(net, x, cond, steps, bank=None, cutoff=1.0, record=None, eta=0.0, rng=None, traces=None):
    abar = _schedule(steps)
    x = np.array(x, dtype=np.float64)
    for s in range(steps):
        t = steps - 1 - s
        inject_now = bank is not None and s < cutoff * steps
        if record is not None:
            record._step = s
        if bank is not None:
            bank._step = s
        trace = {} if traces is not None else None
        eps = net.forward(x, cond, t, steps, bank=bank, inject_now=inject_now, record=record, trace=trace)
        if traces is not None:
            traces.append(trace)
        ab_t = abar[t]
        ab_prev = abar[t - 1] if t > 0 else 1.0
        x0 = (x - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
        sigma = 0.0
        if eta > 0.0:
            sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev)
        x = np.sqrt(ab_prev) * x0 + np.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps
        if sigma > 0.0:
            x = x + sigma * rng.standard_normal(x.shape)
    return x


def denoise(net: ToyUNet, x_t: np.ndarray, cond: np.ndarray, steps: int, seed: int = 0, eta: float = 0.0) -> np.ndarray:
    """Plain DDIM denoising run (linear betas 1e-4..0.02, eta = 0 by
    default, so the trajectory is deterministic; eta > 0 draws the extra
    noise from the seed)."""
    rng = np.random.default_rng(seed)
    return _denoise_loop(net, x_t, cond, steps, eta=eta, rng=rng)


def denoise_record(net: ToyUNet, x_t: np.ndarray, cond: np.ndarray, steps: int, seed: int = 0, eta: float = 0.0):
    """Denoise while recording every self-attention map and the designated
    block's residual feature. Returns (x_0, FeatureBank)."""
    rng = np.random.default_rng(seed)
    record = FeatureBank.__new__(FeatureBank)  # filled during the run, validated after
    record.steps, record.attn, record.residual = steps, {}, {}
    record._step = 0
    x0 = _denoise_loop(net, x_t, cond, steps, record=record, eta=eta, rng=rng)
    bank = FeatureBank(steps=steps, attn=record.attn, residual=record.residual)
    return x0, bank


def denoise_inject(net: ToyUNet, x_t: np.ndarray, cond: np.ndarray, bank: FeatureBank, steps: int, cutoff: float = 1.0, traces=None) -> np.ndarray:
    """Denoise with the bank's attention maps and residual feature replacing
    the net's own for the first cutoff fraction of steps (default: all).
    Cross-attention always consumes the caller's conditioning."""
    if steps != bank.steps:
        raise ValidationError(f"bank was recorded over {bank.steps} steps, run asked for {steps}")
    if not 0.0 <= cutoff <= 1.0:
        raise ValidationError(f"cutoff must lie in [0, 1], got {cutoff}")
    return _denoise_loop(net, x_t, cond, steps, bank=bank, cutoff=cutoff, traces=traces)
