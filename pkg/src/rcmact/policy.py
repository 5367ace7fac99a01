"""Action-chunking CVAE learner with explicit backpropagation.

Encoder q(z | action_chunk, proprio) and decoder pi(chunk_hat | obs, z)
are MLPs over the 17-dim feature observations; the chunking mechanism is
the point, so the backbone stays small enough for exact finite-difference
gradient verification.  Loss is masked reconstruction MSE plus
beta * KL(q || N(0, I)); the KL is averaged over the batch, summed over
latent dimensions, and divided by the latent dimension.

Training uses Adam with decoupled weight decay (weights only, not biases)
and an optional cosine learning-rate schedule.  Everything is a pure
function of (dataset, config): batch sampling, reparameterization noise
and dropout masks all derive from the config seed.

Model file layout ("ARNM"): magic | u32 version | u32 metadata length |
UTF-8 metadata (config.*, stats.*, shape.* lines) | flat f64 LE payload
holding every weight array in shape-table order.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import (
    ACT_DIM,
    OBS_DIM,
    PROPRIO_SLICE,
    NormStats,
    TrainingBatch,
    compute_norm_stats,
    sample_batch,
)
from .errors import (
    CorruptHeaderError,
    FormatVersionMismatchError,
    NonFiniteLossError,
    ShapeMismatchError,
    TruncatedPayloadError,
)

MODEL_MAGIC = b"ARNM"
MODEL_VERSION = 1
PROPRIO_DIM = 5

LR_SCHEDULES = ("cosine", "constant")

# rng substreams hanging off the policy seed
_STREAM_INIT = 10
_STREAM_BATCH = 11
_STREAM_NOISE = 12


@dataclass(frozen=True)
class PolicyConfig:
    chunk_size: int = 90
    latent_dim: int = 8
    hidden_dims: tuple = (256, 256)
    beta: float = 0.5
    dropout: float = 0.1
    latent_dropout: float = 0.5  # P(train sample decodes with z = 0)
    lr: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    weight_decay: float = 1e-4
    epochs: int = 2000
    batch_size: int = 32
    lr_schedule: str = "cosine"
    seed: int = 0
    steps_per_epoch: int | None = None  # None: ceil(total pairs / batch size)

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if not 0.0 <= self.latent_dropout <= 1.0:
            raise ValueError("latent_dropout must be in [0, 1]")
        if self.beta < 0.0:
            raise ValueError("beta must be non-negative")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden dims must be positive")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")

    @property
    def encoder_dims(self) -> list[int]:
        return [self.chunk_size * ACT_DIM + PROPRIO_DIM,
                *self.hidden_dims, 2 * self.latent_dim]

    @property
    def decoder_dims(self) -> list[int]:
        return [OBS_DIM + self.latent_dim,
                *self.hidden_dims, self.chunk_size * ACT_DIM]


@dataclass
class PolicyParameters:
    """All trainable arrays plus the statistics needed to run the policy."""

    config: PolicyConfig
    norm_stats: NormStats
    encoder: list  # [[W, b], ...] with W of shape (in, out)
    decoder: list

    def named_arrays(self):
        for net, layers in (("encoder", self.encoder), ("decoder", self.decoder)):
            for i, (w, b) in enumerate(layers):
                yield f"{net}.{i}.W", w
                yield f"{net}.{i}.b", b


@dataclass(frozen=True)
class LatentSample:
    mu: np.ndarray
    log_var: np.ndarray
    z: np.ndarray


def _init_layers(dims: list[int], rng: np.random.Generator) -> list:
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        layers.append([rng.uniform(-limit, limit, size=(fan_in, fan_out)),
                       np.zeros(fan_out)])
    return layers


def init_parameters(config: PolicyConfig, norm_stats: NormStats) -> PolicyParameters:
    rng = np.random.default_rng([config.seed, _STREAM_INIT])
    encoder = _init_layers(config.encoder_dims, rng)
    decoder = _init_layers(config.decoder_dims, rng)
    # Posterior starts at the prior (mu = 0, log_var = 0) and the decoder
    # starts blind to z.  Inference always runs z = 0, so the latent pathway
    # must only acquire weight when it actually lowers the loss; otherwise a
    # randomly initialized encoder head leaks the chunk through z and the
    # model stops matching its own deployment condition.
    encoder[-1][0][:, :] = 0.0
    decoder[0][0][OBS_DIM:, :] = 0.0
    return PolicyParameters(
        config=config,
        norm_stats=norm_stats,
        encoder=encoder,
        decoder=decoder,
    )


def _forward_mlp(layers, x, dropout_p, rng, train):
    """ReLU MLP forward; dropout (inverted scaling) on hidden activations only.

    Returns (output, cache); cache rows are (layer_input, pre_activation, mask).
    """
    cache = []
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        z = x @ w + b
        if i == last:
            cache.append((x, z, None))
            x = z
            continue
        a = np.maximum(z, 0.0)
        mask = None
        if train and dropout_p > 0.0:
            mask = (rng.random(a.shape) >= dropout_p) / (1.0 - dropout_p)
            a = a * mask
        cache.append((x, z, mask))
        x = a
    return x, cache


def _backward_mlp(layers, cache, dout):
    """Backprop through _forward_mlp; returns ([(dW, db), ...], dinput)."""
    grads = [None] * len(layers)
    grad = dout
    for i in range(len(layers) - 1, -1, -1):
        x_in, z, mask = cache[i]
        if i != len(layers) - 1:
            if mask is not None:
                grad = grad * mask
            grad = grad * (z > 0.0)
        w, _b = layers[i]
        grads[i] = (x_in.T @ grad, grad.sum(axis=0))
        grad = grad @ w.T
    return grads, grad


def _check_shape(name, arr, expected):
    if arr.shape != expected:
        raise ShapeMismatchError(f"{name}: expected {expected}, got {arr.shape}")


def encode(params: PolicyParameters, chunk: np.ndarray, proprio: np.ndarray,
           rng: np.random.Generator) -> LatentSample:
    """Posterior over z for one (normalized) chunk + proprio pair.

    Deterministic given the generator state: z = mu + exp(log_var / 2) * eps
    with eps drawn from rng.
    """
    cfg = params.config
    chunk = np.asarray(chunk, dtype=np.float64)
    proprio = np.asarray(proprio, dtype=np.float64)
    _check_shape("chunk", chunk, (cfg.chunk_size, ACT_DIM))
    _check_shape("proprio", proprio, (PROPRIO_DIM,))
    x = np.concatenate([chunk.ravel(), proprio])[None, :]
    out, _ = _forward_mlp(params.encoder, x, 0.0, None, train=False)
    mu = out[0, :cfg.latent_dim]
    log_var = out[0, cfg.latent_dim:]
    eps = rng.standard_normal(cfg.latent_dim)
    z = mu + np.exp(0.5 * log_var) * eps
    return LatentSample(mu=mu, log_var=log_var, z=z)


def decode(params: PolicyParameters, observation: np.ndarray,
           z: np.ndarray) -> np.ndarray:
    """Predicted (normalized) k x 5 action chunk for one observation."""
    cfg = params.config
    observation = np.asarray(observation, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    _check_shape("observation", observation, (OBS_DIM,))
    _check_shape("z", z, (cfg.latent_dim,))
    x = np.concatenate([observation, z])[None, :]
    out, _ = _forward_mlp(params.decoder, x, 0.0, None, train=False)
    return out.reshape(cfg.chunk_size, ACT_DIM)


def loss_and_grads(params: PolicyParameters, batch: TrainingBatch,
                   rng: np.random.Generator):
    """Total loss, its two terms, and exact gradients for the drawn noise.

    Per training sample the decoder sees either the reparameterized
    z = mu + exp(log_var / 2) * eps or, with probability latent_dropout,
    the zero vector -- the condition it is deployed under.  Without that,
    an unregularized posterior funnels the chunk through z and the
    observation pathway never has to get good.

    Draw order from rng: encoder dropout masks (per hidden layer), the
    reparameterization eps, the latent-zeroing mask, then decoder dropout
    masks.  Gradients are exact for those realizations, which is what the
    finite-difference checks rely on (re-seed the generator to replay them).

    Returns (loss, l_reconst, l_reg, {"encoder": [(dW, db), ...],
    "decoder": [...]}).
    """
    cfg = params.config
    obs = batch.observations
    chunks = batch.action_chunks
    mask = batch.chunk_mask
    bsz = obs.shape[0]
    _check_shape("observations", obs, (bsz, OBS_DIM))
    _check_shape("action_chunks", chunks, (bsz, cfg.chunk_size, ACT_DIM))
    _check_shape("chunk_mask", mask, (bsz, cfg.chunk_size))

    enc_in = np.concatenate(
        [chunks.reshape(bsz, -1), obs[:, PROPRIO_SLICE]], axis=1)
    enc_out, enc_cache = _forward_mlp(params.encoder, enc_in, cfg.dropout,
                                      rng, train=True)
    mu = enc_out[:, :cfg.latent_dim]
    log_var = enc_out[:, cfg.latent_dim:]
    eps = rng.standard_normal(mu.shape)
    std = np.exp(0.5 * log_var)
    z = mu + std * eps
    z_keep = (rng.random((bsz, 1)) >= cfg.latent_dropout).astype(np.float64)

    dec_in = np.concatenate([obs, z * z_keep], axis=1)
    dec_out, dec_cache = _forward_mlp(params.decoder, dec_in, cfg.dropout,
                                      rng, train=True)
    pred = dec_out.reshape(bsz, cfg.chunk_size, ACT_DIM)

    mask_f = mask[:, :, None].astype(np.float64)
    denom = float(mask.sum()) * ACT_DIM
    diff = (pred - chunks) * mask_f
    l_reconst = float((diff * diff).sum() / denom)

    kl_terms = mu * mu + np.exp(log_var) - 1.0 - log_var
    kl_scale = 0.5 / (bsz * cfg.latent_dim)
    l_reg = float(kl_terms.sum() * kl_scale)
    loss = l_reconst + cfg.beta * l_reg
    if not math.isfinite(loss):
        raise NonFiniteLossError(f"loss={loss} (reconst={l_reconst}, reg={l_reg})")

    dpred = (2.0 / denom) * diff
    dec_grads, ddec_in = _backward_mlp(params.decoder, dec_cache,
                                       dpred.reshape(bsz, -1))
    dz = ddec_in[:, OBS_DIM:] * z_keep
    dmu = dz + cfg.beta * kl_scale * 2.0 * mu
    dlog_var = dz * eps * 0.5 * std + cfg.beta * kl_scale * (np.exp(log_var) - 1.0)
    enc_grads, _ = _backward_mlp(params.encoder, enc_cache,
                                 np.concatenate([dmu, dlog_var], axis=1))
    return loss, l_reconst, l_reg, {"encoder": enc_grads, "decoder": dec_grads}


def _lr_at(config: PolicyConfig, step: int, total_steps: int) -> float:
    if config.lr_schedule == "constant":
        return config.lr
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * step / max(total_steps, 1)))


class _AdamW:
    """Decoupled-weight-decay Adam over the layer lists, updating in place."""

    def __init__(self, params: PolicyParameters):
        cfg = params.config
        self.beta1 = cfg.adam_beta1
        self.beta2 = cfg.adam_beta2
        self.weight_decay = cfg.weight_decay
        self.eps = 1e-8
        self.t = 0
        self.state = {
            name: (np.zeros_like(arr), np.zeros_like(arr))
            for name, arr in params.named_arrays()
        }

    def step(self, params: PolicyParameters, grads, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for net, layers in (("encoder", params.encoder), ("decoder", params.decoder)):
            for i, (w, b) in enumerate(layers):
                for suffix, arr, grad in (("W", w, grads[net][i][0]),
                                          ("b", b, grads[net][i][1])):
                    m, v = self.state[f"{net}.{i}.{suffix}"]
                    m *= self.beta1
                    m += (1.0 - self.beta1) * grad
                    v *= self.beta2
                    v += (1.0 - self.beta2) * grad * grad
                    update = (m / c1) / (np.sqrt(v / c2) + self.eps)
                    if suffix == "W":
                        update = update + self.weight_decay * arr
                    arr -= lr * update


def train(episodes, config: PolicyConfig, on_epoch=None) -> PolicyParameters:
    """Fit the CVAE on calibrated episodes; pure function of (data, config).

    on_epoch, when given, is called as on_epoch(epoch, loss, l_reconst, l_reg)
    with per-epoch means.  Raises NonFiniteLossError with the failing step
    index if training diverges.
    """
    episodes = list(episodes)
    stats = compute_norm_stats(episodes)
    params = init_parameters(config, stats)
    rng_batch = np.random.default_rng([config.seed, _STREAM_BATCH])
    rng_noise = np.random.default_rng([config.seed, _STREAM_NOISE])

    total_pairs = sum(ep.length for ep in episodes)
    spe = config.steps_per_epoch
    if spe is None:
        spe = max(1, math.ceil(total_pairs / config.batch_size))
    total_steps = config.epochs * spe
    optimizer = _AdamW(params)

    global_step = 0
    for epoch in range(config.epochs):
        sums = np.zeros(3)
        for _ in range(spe):
            batch = sample_batch(episodes, stats, config.chunk_size,
                                 config.batch_size, rng_batch)
            try:
                loss, l_rec, l_reg, grads = loss_and_grads(params, batch, rng_noise)
            except NonFiniteLossError as exc:
                raise NonFiniteLossError(f"step {global_step}: {exc}") from exc
            lr = _lr_at(config, global_step, total_steps)
            optimizer.step(params, grads, lr)
            global_step += 1
            sums += (loss, l_rec, l_reg)
        if on_epoch is not None:
            on_epoch(epoch, *(sums / spe))
    return params


def open_loop_reconstruction_mse(params: PolicyParameters, episode) -> float:
    """Masked normalized chunk-prediction MSE over every timestep, z = 0."""
    cfg = params.config
    stats = params.norm_stats
    z = np.zeros(cfg.latent_dim)
    total = 0.0
    count = 0
    for t in range(episode.length):
        pred = decode(params, stats.normalize_obs(episode.observations[t]), z)
        avail = min(cfg.chunk_size, episode.length - t)
        target = stats.normalize_actions(episode.actions[t:t + avail])
        err = pred[:avail] - target
        total += float((err * err).sum())
        count += avail * ACT_DIM
    return total / count


# --- model file -------------------------------------------------------------

def _config_lines(cfg: PolicyConfig) -> list[str]:
    spe = "auto" if cfg.steps_per_epoch is None else str(cfg.steps_per_epoch)
    return [
        f"config.chunk_size={cfg.chunk_size}",
        f"config.latent_dim={cfg.latent_dim}",
        "config.hidden_dims=" + ",".join(str(h) for h in cfg.hidden_dims),
        f"config.beta={cfg.beta!r}",
        f"config.dropout={cfg.dropout!r}",
        f"config.latent_dropout={cfg.latent_dropout!r}",
        f"config.lr={cfg.lr!r}",
        f"config.adam_beta1={cfg.adam_beta1!r}",
        f"config.adam_beta2={cfg.adam_beta2!r}",
        f"config.weight_decay={cfg.weight_decay!r}",
        f"config.epochs={cfg.epochs}",
        f"config.batch_size={cfg.batch_size}",
        f"config.lr_schedule={cfg.lr_schedule}",
        f"config.seed={cfg.seed}",
        f"config.steps_per_epoch={spe}",
    ]


def _config_from_mapping(kv: dict[str, str]) -> PolicyConfig:
    def get(key):
        try:
            return kv[f"config.{key}"]
        except KeyError as exc:
            raise CorruptHeaderError(f"model metadata missing {exc}") from exc

    hidden = get("hidden_dims")
    spe = get("steps_per_epoch")
    return PolicyConfig(
        chunk_size=int(get("chunk_size")),
        latent_dim=int(get("latent_dim")),
        hidden_dims=tuple(int(h) for h in hidden.split(",")) if hidden else (),
        beta=float(get("beta")),
        dropout=float(get("dropout")),
        latent_dropout=float(get("latent_dropout")),
        lr=float(get("lr")),
        adam_beta1=float(get("adam_beta1")),
        adam_beta2=float(get("adam_beta2")),
        weight_decay=float(get("weight_decay")),
        epochs=int(get("epochs")),
        batch_size=int(get("batch_size")),
        lr_schedule=get("lr_schedule"),
        seed=int(get("seed")),
        steps_per_epoch=None if spe == "auto" else int(spe),
    )


def save_parameters(params: PolicyParameters, path) -> None:
    """Write the ARNM model file; deterministic bytes for identical params."""
    lines = _config_lines(params.config)
    lines.extend("stats." + line for line in params.norm_stats.to_lines())
    named = list(params.named_arrays())
    lines.extend(
        f"shape.{name}=" + ",".join(str(s) for s in arr.shape)
        for name, arr in named
    )
    meta = ("\n".join(lines) + "\n").encode("utf-8")
    payload = b"".join(arr.astype("<f8").tobytes() for _, arr in named)
    Path(path).write_bytes(
        MODEL_MAGIC + struct.pack("<II", MODEL_VERSION, len(meta)) + meta + payload)


def load_parameters(path) -> PolicyParameters:
    """Read an ARNM model file, rejecting shape-table mismatches."""
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise TruncatedPayloadError(f"{path}: too short for a header")
    if blob[:4] != MODEL_MAGIC:
        raise CorruptHeaderError(f"{path}: bad magic {blob[:4]!r}")
    version, mlen = struct.unpack_from("<II", blob, 4)
    if version != MODEL_VERSION:
        raise FormatVersionMismatchError(f"{path}: version {version}")
    if 12 + mlen > len(blob):
        raise TruncatedPayloadError(f"{path}: metadata runs past end of file")
    try:
        kv_text = blob[12:12 + mlen].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorruptHeaderError(f"{path}: metadata is not UTF-8") from exc
    kv = {}
    for line in kv_text.splitlines():
        if line.strip():
            if "=" not in line:
                raise CorruptHeaderError(f"{path}: malformed metadata line {line!r}")
            key, value = line.split("=", 1)
            kv[key] = value
    config = _config_from_mapping(kv)
    stats = NormStats.from_mapping(
        {k[len("stats."):]: v for k, v in kv.items() if k.startswith("stats.")})

    expected = []
    for net, dims in (("encoder", config.encoder_dims),
                      ("decoder", config.decoder_dims)):
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            expected.append((f"{net}.{i}.W", (fan_in, fan_out)))
            expected.append((f"{net}.{i}.b", (fan_out,)))
    for name, shape in expected:
        declared = kv.get(f"shape.{name}")
        if declared is None:
            raise ShapeMismatchError(f"{path}: shape table missing {name}")
        if tuple(int(s) for s in declared.split(",")) != shape:
            raise ShapeMismatchError(
                f"{path}: {name} declared {declared}, config implies {shape}")

    total = sum(int(np.prod(shape)) for _, shape in expected)
    payload = blob[12 + mlen:]
    if len(payload) < total * 8:
        raise TruncatedPayloadError(f"{path}: payload ends mid-array")
    if len(payload) != total * 8:
        raise CorruptHeaderError(f"{path}: {len(payload) - total * 8} trailing bytes")
    flat = np.frombuffer(payload, dtype="<f8").copy()

    offset = 0
    arrays = {}
    for name, shape in expected:
        size = int(np.prod(shape))
        arrays[name] = flat[offset:offset + size].reshape(shape)
        offset += size
    encoder = [[arrays[f"encoder.{i}.W"], arrays[f"encoder.{i}.b"]]
               for i in range(len(config.encoder_dims) - 1)]
    decoder = [[arrays[f"decoder.{i}.W"], arrays[f"decoder.{i}.b"]]
               for i in range(len(config.decoder_dims) - 1)]
    return PolicyParameters(config=config, norm_stats=stats,
                            encoder=encoder, decoder=decoder)
