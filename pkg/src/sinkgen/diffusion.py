"""Denoising diffusion over standardized design vectors.

Forward corruption, the cosine noise schedule, a 1-d U-Net noise predictor
with sinusoidal time conditioning, epsilon-prediction training, and the
ancestral sampling loop. Design vectors enter as raw 48-float rows and are
z-standardized per coordinate; the sampler maps back to raw space at the end.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .autodiff import AdamW, NonFiniteError, Tape, Tensor, write_checkpoint, read_checkpoint
from .geometry import DESIGN_DIM, FeatureStats, destandardize, fit_feature_stats, standardize

DEFAULT_T = 1000
DEFAULT_S = 0.008
BETA_CLIP = 0.999


class TrainingDivergedError(RuntimeError):
    """Raised when a non-finite loss or gradient appears; carries the last
    finite end-of-epoch parameter snapshot."""

    def __init__(self, message, snapshot=None, step_losses=None):
        super().__init__(message)
        self.snapshot = snapshot
        self.step_losses = step_losses or []


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays indexed 1..T; slot 0 is the identity sentinel (no noise)."""

    T: int
    s: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray


def cosine_schedule(T: int = DEFAULT_T, s: float = DEFAULT_S) -> NoiseSchedule:
    """Squared-cosine signal level; betas from consecutive ratios, clipped at
    0.999, then alpha_bar recomputed as the running product so the identity
    alpha_bar_t = prod(alpha) holds exactly in floating point."""
    t = np.arange(T + 1, dtype=float)
    f = np.cos(((t / T + s) / (1.0 + s)) * (np.pi / 2.0)) ** 2
    ratio = f / f[0]
    beta = np.zeros(T + 1)
    beta[1:] = np.clip(1.0 - ratio[1:] / ratio[:-1], 0.0, BETA_CLIP)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(beta)
    return NoiseSchedule(T=T, s=s, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma)


def q_sample(x0: np.ndarray, t: np.ndarray, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form forward corruption x_t = sqrt(ab_t) x0 + sqrt(1-ab_t) eps."""
    x0 = np.asarray(x0, dtype=float)
    t = np.asarray(t)
    ab = schedule.alpha_bar[t].reshape(t.shape + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def reverse_step(
    x_t: np.ndarray,
    t: int,
    eps_hat: np.ndarray,
    z: np.ndarray,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """One ancestral step with the fixed variance sigma_t^2 = beta_t."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"timestep {t} outside 1..{schedule.T}")
    beta = schedule.beta[t]
    mean = (x_t - (beta / np.sqrt(1.0 - schedule.alpha_bar[t])) * eps_hat) / np.sqrt(schedule.alpha[t])
    return mean + schedule.sigma[t] * z


def time_embedding(t: np.ndarray, dim: int = 256) -> np.ndarray:
    """Concatenated sin/cos halves over a geometric frequency ladder."""
    t = np.asarray(t, dtype=float).reshape(-1)
    k = np.arange(dim // 2, dtype=float)
    omega = 10000.0 ** (-2.0 * k / dim)
    ang = t[:, None] * omega[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass(frozen=True)
class UNetConfig:
    length: int = 48
    in_channels: int = 1
    stage_channels: tuple = (64, 64, 128, 256)
    res_blocks: int = 2
    groups: int = 8
    time_dim: int = 256
    dropout: float = 0.1
    up_kernels: tuple = (3, 1, 3)  # per decoder stage, innermost last


@dataclass
class TrainConfig:
    epochs: int = 750
    batch_size: int = 128
    lr: float = 1e-4
    weight_decay: float = 0.0
    val_fraction: float = 0.05
    seed: int = 0


def _conv_params(rng, c_out, c_in, k, zero=False):
    if zero:
        w = np.zeros((c_out, c_in, k))
    else:
        w = rng.standard_normal((c_out, c_in, k)) * np.sqrt(2.0 / (c_in * k))
    return Tensor(w, requires_grad=True), Tensor(np.zeros(c_out), requires_grad=True)

def _linear_params(rng, f_in, f_out):
    w = rng.standard_normal((f_in, f_out)) * np.sqrt(2.0 / f_in)
    return Tensor(w, requires_grad=True), Tensor(np.zeros(f_out), requires_grad=True)

def _norm_params(c):
    return Tensor(np.ones(c), requires_grad=True), Tensor(np.zeros(c), requires_grad=True)


def _add_res_block(params, rng, prefix, c, time_dim):
    params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"] = _conv_params(rng, c, c, 3)
    params[f"{prefix}.gn1.g"], params[f"{prefix}.gn1.b"] = _norm_params(c)
    params[f"{prefix}.temb.w"], params[f"{prefix}.temb.b"] = _linear_params(rng, time_dim, c)
    params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"] = _conv_params(rng, c, c, 3)
    params[f"{prefix}.gn2.g"], params[f"{prefix}.gn2.b"] = _norm_params(c)


def init_unet_params(cfg: UNetConfig, rng: np.random.Generator) -> dict:
    """He-initialized weights; the output head conv starts at zero so the
    initial prediction is the zero field."""
    ch = cfg.stage_channels
    params = {}
    params["stem.w"], params["stem.b"] = _conv_params(rng, ch[0], cfg.in_channels, 3)
    for i in range(len(ch) - 1):
        for r in range(cfg.res_blocks):
            _add_res_block(params, rng, f"enc{i}.res{r}", ch[i], cfg.time_dim)
        params[f"down{i}.w"], params[f"down{i}.b"] = _conv_params(rng, ch[i + 1], ch[i], 4)
    for r in range(cfg.res_blocks):
        _add_res_block(params, rng, f"mid.res{r}", ch[-1], cfg.time_dim)
    for i in reversed(range(len(ch) - 1)):
        k = cfg.up_kernels[i]
        params[f"up{i}.w"], params[f"up{i}.b"] = _conv_params(rng, ch[i], ch[i + 1], k)
        for r in range(cfg.res_blocks):
            _add_res_block(params, rng, f"dec{i}.res{r}", ch[i], cfg.time_dim)
    params["head.gn.g"], params["head.gn.b"] = _norm_params(ch[0])
    params["head.w"], params["head.b"] = _conv_params(rng, cfg.in_channels, ch[0], 3, zero=True)
    return params


def _res_forward(tape, params, prefix, h, emb_act, cfg, training, rng):
    y = tape.conv1d(h, params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"], padding=1)
    y = tape.group_norm(y, cfg.groups, params[f"{prefix}.gn1.g"], params[f"{prefix}.gn1.b"])
    y = tape.silu(y)
    tb = tape.linear(emb_act, params[f"{prefix}.temb.w"], params[f"{prefix}.temb.b"])
    y = tape.add_channel_bias(y, tb)
    y = tape.conv1d(y, params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"], padding=1)
    y = tape.group_norm(y, cfg.groups, params[f"{prefix}.gn2.g"], params[f"{prefix}.gn2.b"])
    y = tape.silu(y)
    y = tape.dropout(y, cfg.dropout, rng, training)
    return tape.add(y, h)


def unet_forward(
    tape: Tape,
    params: dict,
    cfg: UNetConfig,
    x: np.ndarray,
    t: np.ndarray,
    training: bool = False,
    rng: np.random.Generator = None,
) -> Tensor:
    """Noise prediction for a batch: x (batch, 1, length), t (batch,) ints.

    Encoder stages tap additive skips before each strided downsampling; the
    decoder adds them back right after its channel-matching convolution. The
    single-channel boundary tensors are reinterpreted as (batch, length, 1)
    for the channels-last conv stack; both reshapes are free.
    """
    ch = cfg.stage_channels
    x = np.asarray(x, dtype=float)
    batch = x.shape[0]
    emb = Tensor(time_embedding(t, cfg.time_dim))
    emb_act = tape.silu(emb)
    h = Tensor(x.reshape(batch, cfg.length, cfg.in_channels))
    h = tape.conv1d(h, params["stem.w"], params["stem.b"], padding=1)
    skips = []
    for i in range(len(ch) - 1):
        for r in range(cfg.res_blocks):
            h = _res_forward(tape, params, f"enc{i}.res{r}", h, emb_act, cfg, training, rng)
        skips.append(h)
        h = tape.conv1d(h, params[f"down{i}.w"], params[f"down{i}.b"], stride=2, padding=1)
    for r in range(cfg.res_blocks):
        h = _res_forward(tape, params, f"mid.res{r}", h, emb_act, cfg, training, rng)
    for i in reversed(range(len(ch) - 1)):
        k = cfg.up_kernels[i]
        h = tape.upsample_nearest_2x(h)
        h = tape.conv1d(h, params[f"up{i}.w"], params[f"up{i}.b"], padding=(k - 1) // 2)
        h = tape.add(h, skips[i])
        for r in range(cfg.res_blocks):
            h = _res_forward(tape, params, f"dec{i}.res{r}", h, emb_act, cfg, training, rng)
    h = tape.group_norm(h, cfg.groups, params["head.gn.g"], params["head.gn.b"])
    h = tape.silu(h)
    h = tape.conv1d(h, params["head.w"], params["head.b"], padding=1)
    return tape.reshape(h, (batch, cfg.in_channels, cfg.length))


@dataclass
class DiffusionModel:
    cfg: UNetConfig
    params: dict
    stats: FeatureStats
    schedule: NoiseSchedule


@dataclass
class TrainResult:
    model: DiffusionModel
    step_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)


def train_ddpm(
    designs: np.ndarray,
    unet_cfg: UNetConfig,
    train_cfg: TrainConfig,
    schedule: NoiseSchedule = None,
    progress=None,
) -> TrainResult:
    """Epsilon-prediction MSE training with AdamW on raw design rows.

    Standardization statistics come from the training split only; a held-out
    fraction is scored each epoch against a frozen (t, eps) draw so the
    validation curve is comparable across epochs. Partial trailing batches
    are dropped to keep every step the same shape.
    """
    if schedule is None:
        schedule = cosine_schedule()
    designs = np.asarray(designs, dtype=float).reshape(-1, DESIGN_DIM)
    n = designs.shape[0]
    rng_train = rngmod.stream(train_cfg.seed, rngmod.TRAIN)
    order = rng_train.permutation(n)
    n_val = int(round(train_cfg.val_fraction * n))
    val_idx = order[:n_val]
    tr_idx = order[n_val:]
    stats = fit_feature_stats(designs[tr_idx])
    x_train = standardize(designs[tr_idx], stats)[:, None, :]
    x_val = standardize(designs[val_idx], stats)[:, None, :] if n_val else None

    params = init_unet_params(unet_cfg, rngmod.stream(train_cfg.seed, rngmod.INIT))
    opt = AdamW(params, lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)

    if n_val:
        rng_val = rngmod.stream(train_cfg.seed, rngmod.VAL)
        t_val = rng_val.integers(1, schedule.T + 1, size=n_val)
        eps_val = rng_val.standard_normal(x_val.shape)
        xt_val = q_sample(x_val, t_val, eps_val, schedule)

    batch = train_cfg.batch_size
    n_tr = x_train.shape[0]
    steps_per_epoch = n_tr // batch
    if steps_per_epoch == 0:
        raise ValueError(f"need at least {batch} training rows, got {n_tr}")

    step_losses = []
    val_losses = []
    snapshot = {k: p.data.copy() for k, p in params.items()}
    for epoch in range(train_cfg.epochs):
        perm = rng_train.permutation(n_tr)
        try:
            for s in range(steps_per_epoch):
                idx = perm[s * batch:(s + 1) * batch]
                x0 = x_train[idx]
                t = rng_train.integers(1, schedule.T + 1, size=batch)
                eps = rng_train.standard_normal(x0.shape)
                xt = q_sample(x0, t, eps, schedule)
                # divergence is caught by the loss and gradient scans below,
                # so per-op finite checking would only add a full extra pass
                tape = Tape(recording=True)
                eps_hat = unet_forward(tape, params, unet_cfg, xt, t, training=True, rng=rng_train)
                loss = tape.mse(eps_hat, eps)
                loss_val = float(loss.data)
                if not np.isfinite(loss_val):
                    raise NonFiniteError("non-finite training loss")
                tape.backward(loss)
                for p in params.values():
                    if p.grad is not None and not np.all(np.isfinite(p.grad)):
                        raise NonFiniteError("non-finite gradient")
                opt.step()
                opt.zero_grad()
                step_losses.append(loss_val)
        except NonFiniteError as err:
            raise TrainingDivergedError(str(err), snapshot=snapshot, step_losses=step_losses) from err
        snapshot = {k: p.data.copy() for k, p in params.items()}
        if n_val:
            pred = unet_forward(Tape(recording=False), params, unet_cfg, xt_val, t_val)
            val_losses.append(float(np.mean((pred.data - eps_val) ** 2)))
        if progress is not None:
            epoch_mean = float(np.mean(step_losses[-steps_per_epoch:]))
            progress(epoch, epoch_mean, val_losses[-1] if val_losses else float("nan"))

    model = DiffusionModel(cfg=unet_cfg, params=params, stats=stats, schedule=schedule)
    return TrainResult(model=model, step_losses=step_losses, val_losses=val_losses)


def sample(
    model: DiffusionModel,
    n: int,
    master_seed: int,
    guidance=None,
    progress=None,
) -> np.ndarray:
    """Ancestral sampling of n chains; returns raw design rows (n, 48).

    Each chain owns the counter-based stream keyed (master_seed, chain), so a
    chain's noise sequence is independent of how many chains run beside it.
    ``guidance`` (optional) maps (x, t) -> x before each denoising step; the
    unguided path never calls it, so guidance=None is the exact base sampler.
    """
    sch = model.schedule
    dim = model.cfg.length
    if n == 0:
        return np.zeros((0, dim))
    chains = [rngmod.stream(master_seed, i) for i in range(n)]
    x = np.stack([c.standard_normal(dim) for c in chains])[:, None, :]
    for t in range(sch.T, 0, -1):
        if guidance is not None:
            x = guidance(x, t)
        t_arr = np.full(n, t, dtype=int)
        eps_hat = unet_forward(Tape(recording=False), model.params, model.cfg, x, t_arr).data
        if t > 1:
            z = np.stack([c.standard_normal(dim) for c in chains])[:, None, :]
        else:
            z = np.zeros_like(x)
        x = reverse_step(x, t, eps_hat, z, sch)
        if progress is not None and t % 100 == 1:
            progress(t)
    return destandardize(x[:, 0, :], model.stats)


_META_KEYS = ("length", "in_channels", "res_blocks", "groups", "time_dim", "dropout")


def save_model(path, model: DiffusionModel) -> None:
    arrays = {f"param.{k}": p.data for k, p in model.params.items()}
    arrays["stats.mean"] = model.stats.mean
    arrays["stats.std"] = model.stats.std
    arrays["meta.T"] = np.asarray(float(model.schedule.T))
    arrays["meta.s"] = np.asarray(model.schedule.s)
    arrays["meta.stage_channels"] = np.asarray(model.cfg.stage_channels, dtype=float)
    arrays["meta.up_kernels"] = np.asarray(model.cfg.up_kernels, dtype=float)
    for key in _META_KEYS:
        arrays[f"meta.{key}"] = np.asarray(float(getattr(model.cfg, key)))
    write_checkpoint(path, "unet", arrays)


def load_model(path) -> DiffusionModel:
    kind, arrays = read_checkpoint(path)
    if kind != "unet":
        raise ValueError(f"expected a unet checkpoint, got kind '{kind}'")
    cfg = UNetConfig(
        length=int(arrays["meta.length"]),
        in_channels=int(arrays["meta.in_channels"]),
        stage_channels=tuple(int(c) for c in arrays["meta.stage_channels"]),
        res_blocks=int(arrays["meta.res_blocks"]),
        groups=int(arrays["meta.groups"]),
        time_dim=int(arrays["meta.time_dim"]),
        dropout=float(arrays["meta.dropout"]),
        up_kernels=tuple(int(k) for k in arrays["meta.up_kernels"]),
    )
    params = {
        k[len("param."):]: Tensor(v, requires_grad=True)
        for k, v in arrays.items()
        if k.startswith("param.")
    }
    stats = FeatureStats(mean=arrays["stats.mean"], std=arrays["stats.std"])
    schedule = cosine_schedule(T=int(arrays["meta.T"]), s=float(arrays["meta.s"]))
    return DiffusionModel(cfg=cfg, params=params, stats=stats, schedule=schedule)
