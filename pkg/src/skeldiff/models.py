"""The noise-prediction denoiser, the patch-attention action classifier, and
their training loops.

Both networks run on the float64 autodiff engine.  The denoiser is an
encoder-decoder over 32x32x3 skeleton images with additive time conditioning;
the classifier attends over non-overlapping patches, so rows (joints) and
columns (time) are mixed jointly — the property that lets its input gradient
steer sampling.  Desk-scale defaults fit a CPU; paper-scale values (128 base
channels, 3 blocks per resolution) remain configurable.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .codec import NormParams, encode, fit_norm_params, resample_time
from .data import Dataset
from .diffusion import NoiseSchedule, q_sample
from .optim import AdamWHyper, adamw_init, adamw_step, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

IN_CHANNELS = 3


@dataclass
class DenoiserConfig:
    base_channels: int = 32           # paper scale: 128
    res_blocks_per_resolution: int = 2  # paper scale: 3
    resolutions: tuple[int, ...] = (32, 16, 8)
    time_embed_dim: int = 64
    # fold f x f pixel blocks into channels before the first conv (and unfold
    # after the head); f=2 runs the whole net at half resolution, which is the
    # CPU-friendly desk profile.  resolutions then start at 32 / f.
    space_to_depth: int = 1

    def __post_init__(self):
        self.resolutions = tuple(int(r) for r in self.resolutions)
        if self.base_channels < 1 or self.res_blocks_per_resolution < 1:
            raise ValueError("channels and block counts must be positive")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ValueError(f"time_embed_dim must be even and >= 2, got {self.time_embed_dim}")
        if not self.resolutions:
            raise ValueError("need at least one resolution")
        for a, b in zip(self.resolutions, self.resolutions[1:]):
            if b * 2 != a:
                raise ValueError(f"resolutions must halve, got {self.resolutions}")
        if self.space_to_depth < 1:
            raise ValueError("space_to_depth factor must be >= 1")

    @property
    def image_size(self) -> int:
        return self.resolutions[0] * self.space_to_depth


@dataclass
class STTransConfig:
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 2
    num_classes: int = 4
    image_size: int = 32

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by {self.heads} heads")
        if min(self.depth, self.heads, self.mlp_ratio, self.num_classes) < 1:
            raise ValueError("depth, heads, mlp_ratio and num_classes must be positive")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    batch_size: int = 64
    iterations: int = 2000
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables intermediate snapshots

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.iterations < 1:
            raise ValueError("lr, batch_size and iterations must be positive")


def time_embedding(t, dim: int) -> np.ndarray:
    """Parameter-free sinusoidal step embedding, sin/cos interleaved.

    Frequencies are geometrically spaced from 1 down to 1/10000; t = 0 maps to
    (0, 1, 0, 1, ...).
    """
    if dim < 2 or dim % 2:
        raise ValueError(f"embedding dim must be even and >= 2, got {dim}")
    t_arr = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = t_arr[..., None] * freqs
    emb = np.empty(t_arr.shape + (dim,), dtype=np.float64)
    emb[..., 0::2] = np.sin(angles)
    emb[..., 1::2] = np.cos(angles)
    return emb


class _ParamStore:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, Value] = {}

    def conv(self, name, kh, kw, cin, cout, zero=False):
        std = math.sqrt(2.0 / (kh * kw * cin))
        w = np.zeros((kh, kw, cin, cout)) if zero else self.rng.normal(0.0, std, (kh, kw, cin, cout))
        return self._add(f"{name}.w", w), self._add(f"{name}.b", np.zeros(cout))

    def dense(self, name, fin, fout, zero=False, std=None):
        if std is None:
            std = math.sqrt(2.0 / (fin + fout))
        w = np.zeros((fin, fout)) if zero else self.rng.normal(0.0, std, (fin, fout))
        return self._add(f"{name}.w", w), self._add(f"{name}.b", np.zeros(fout))

    def layer_norm(self, name, d):
        return self._add(f"{name}.g", np.ones(d)), self._add(f"{name}.b", np.zeros(d))

    def table(self, name, rows, cols, std=0.02):
        return self._add(name, self.rng.normal(0.0, std, (rows, cols)))

    def _add(self, name, array) -> Value:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        v = Value(np.asarray(array, dtype=np.float64), requires_grad=True)
        self.params[name] = v
        return v


class _ResBlock:
    """norm -> silu -> conv, add projected time embedding, norm -> silu -> conv, skip."""

    def __init__(self, store: _ParamStore, name: str, cin: int, cout: int, tdim: int):
        self.ln1 = store.layer_norm(f"{name}.ln1", cin)
        self.conv1 = store.conv(f"{name}.conv1", 3, 3, cin, cout)
        self.temb = store.dense(f"{name}.temb", tdim, cout)
        self.ln2 = store.layer_norm(f"{name}.ln2", cout)
        self.conv2 = store.conv(f"{name}.conv2", 3, 3, cout, cout)
        self.proj = store.conv(f"{name}.proj", 1, 1, cin, cout) if cin != cout else None

    def __call__(self, h: Value, temb_act: Value) -> Value:
        y = ad.conv2d(ad.silu(ad.layer_norm(h, *self.ln1)), *self.conv1, pad=1)
        shift = ad.dense(temb_act, *self.temb)
        y = ad.add(y, ad.reshape(shift, (shift.shape[0], 1, 1, shift.shape[1])))
        y = ad.conv2d(ad.silu(ad.layer_norm(y, *self.ln2)), *self.conv2, pad=1)
        skip = h if self.proj is None else ad.conv2d(h, *self.proj)
        return ad.add(y, skip)


class Denoiser:
    """eps_theta(x_t, t): encoder-decoder with skip connections and time conditioning.

    The output head is zero-initialized, so an untrained network predicts
    exactly zero noise.
    """

    def __init__(self, cfg: DenoiserConfig | None = None, seed: int = 0):
        self.cfg = cfg if cfg is not None else DenoiserConfig()
        self.seed = seed
        store = _ParamStore(np.random.default_rng(np.random.SeedSequence((seed, 0xD1))))
        c = self.cfg.base_channels
        tdim = self.cfg.time_embed_dim
        f = self.cfg.space_to_depth
        in_ch = IN_CHANNELS * f * f
        self.time_mlp1 = store.dense("time_mlp1", tdim, tdim)
        self.time_mlp2 = store.dense("time_mlp2", tdim, tdim)
        self.stem = store.conv("stem", 3, 3, in_ch, c)
        levels = len(self.cfg.resolutions)
        blocks = self.cfg.res_blocks_per_resolution
        self.enc = [
            [_ResBlock(store, f"enc{i}.block{b}", c, c, tdim) for b in range(blocks)]
            for i in range(levels)
        ]
        # decoder levels mirror encoder levels 0..L-2; the first block of each
        # absorbs the concatenated skip (2c -> c)
        self.dec = [
            [
                _ResBlock(store, f"dec{i}.block{b}", 2 * c if b == 0 else c, c, tdim)
                for b in range(blocks)
            ]
            for i in range(levels - 1)
        ]
        self.head_ln = store.layer_norm("head_ln", c)
        self.head = store.conv("head", 3, 3, c, in_ch, zero=True)
        self.params = store.params

    def _space_to_depth(self, x: Value) -> Value:
        f = self.cfg.space_to_depth
        n, s, _, c = x.shape
        x = ad.reshape(x, (n, s // f, f, s // f, f, c))
        x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
        return ad.reshape(x, (n, s // f, s // f, f * f * c))

    def _depth_to_space(self, x: Value) -> Value:
        f = self.cfg.space_to_depth
        n, r, _, packed = x.shape
        c = packed // (f * f)
        x = ad.reshape(x, (n, r, r, f, f, c))
        x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
        return ad.reshape(x, (n, r * f, r * f, c))

    def forward(self, x, t) -> Value:
        x = ad.as_value(x)
        size = self.cfg.image_size
        if x.ndim != 4 or x.shape[1] != size or x.shape[2] != size or x.shape[3] != IN_CHANNELS:
            raise ValueError(f"denoiser expects (N, {size}, {size}, {IN_CHANNELS}), got {x.shape}")
        t_arr = np.broadcast_to(np.asarray(t), (x.shape[0],))
        temb = Value(time_embedding(t_arr, self.cfg.time_embed_dim))
        temb = ad.dense(temb, *self.time_mlp1)
        temb_act = ad.silu(ad.dense(ad.silu(temb), *self.time_mlp2))

        if self.cfg.space_to_depth > 1:
            x = self._space_to_depth(x)
        h = ad.conv2d(x, *self.stem, pad=1)
        skips = []
        for i, level in enumerate(self.enc):
            for block in level:
                h = block(h, temb_act)
            skips.append(h)
            if i < len(self.enc) - 1:
                h = ad.avg_pool2d(h, 2)
        for i in range(len(self.dec) - 1, -1, -1):
            h = ad.upsample_nearest2d(h, 2)
            h = ad.concat([h, skips[i]], axis=-1)
            for block in self.dec[i]:
                h = block(h, temb_act)
        h = ad.silu(ad.layer_norm(h, *self.head_ln))
        out = ad.conv2d(h, *self.head, pad=1)
        if self.cfg.space_to_depth > 1:
            out = self._depth_to_space(out)
        return out

    def __call__(self, x: np.ndarray, t) -> np.ndarray:
        """Inference: accepts (H, W, C) or (N, H, W, C) arrays, returns the same shape."""
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        with ad.no_grad():
            out = self.forward(x, t).data
        return out[0] if squeeze else out


class ActionTransformer:
    """Patch-attention classifier over skeleton images (the guiding network).

    Patchify -> linear embed + learned positions -> pre-norm attention/MLP
    blocks -> final norm -> token mean-pool -> zero-initialized linear head.
    The pooled embedding doubles as the feature vector for the metrics.
    """

    def __init__(self, cfg: STTransConfig | None = None, seed: int = 0):
        self.cfg = cfg if cfg is not None else STTransConfig()
        self.seed = seed
        store = _ParamStore(np.random.default_rng(np.random.SeedSequence((seed, 0xC1))))
        d = self.cfg.embed_dim
        p = self.cfg.patch_size
        self.embed = store.dense("embed", p * p * IN_CHANNELS, d)
        self.pos = store.table("pos", self.cfg.num_patches, d)
        self.blocks = []
        for i in range(self.cfg.depth):
            self.blocks.append(
                {
                    "ln1": store.layer_norm(f"block{i}.ln1", d),
                    "wq": store.dense(f"block{i}.q", d, d),
                    "wk": store.dense(f"block{i}.k", d, d),
                    "wv": store.dense(f"block{i}.v", d, d),
                    "wo": store.dense(f"block{i}.out", d, d),
                    "ln2": store.layer_norm(f"block{i}.ln2", d),
                    "mlp1": store.dense(f"block{i}.mlp1", d, d * self.cfg.mlp_ratio),
                    "mlp2": store.dense(f"block{i}.mlp2", d * self.cfg.mlp_ratio, d),
                }
            )
        self.final_ln = store.layer_norm("final_ln", d)
        self.head = store.dense("head", d, self.cfg.num_classes, zero=True)
        self.params = store.params

    def _patchify(self, x: Value) -> Value:
        n = x.shape[0]
        s, p = self.cfg.image_size, self.cfg.patch_size
        g = s // p
        x = ad.reshape(x, (n, g, p, g, p, IN_CHANNELS))
        x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
        return ad.reshape(x, (n, g * g, p * p * IN_CHANNELS))

    def features_and_logits(self, x) -> tuple[Value, Value]:
        x = ad.as_value(x)
        s = self.cfg.image_size
        if x.ndim != 4 or x.shape[1:] != (s, s, IN_CHANNELS):
            raise ValueError(f"classifier expects (N, {s}, {s}, {IN_CHANNELS}), got {x.shape}")
        tokens = ad.dense(self._patchify(x), *self.embed)
        tokens = ad.add(tokens, ad.embedding_lookup(self.pos, np.arange(self.cfg.num_patches)))
        for blk in self.blocks:
            normed = ad.layer_norm(tokens, *blk["ln1"])
            attn = ad.multi_head_attention(
                ad.dense(normed, *blk["wq"]),
                ad.dense(normed, *blk["wk"]),
                ad.dense(normed, *blk["wv"]),
                self.cfg.heads,
            )
            tokens = ad.add(tokens, ad.dense(attn, *blk["wo"]))
            normed = ad.layer_norm(tokens, *blk["ln2"])
            hidden = ad.dense(ad.gelu(ad.dense(normed, *blk["mlp1"])), *blk["mlp2"])
            tokens = ad.add(tokens, hidden)
        pooled = ad.mean(ad.layer_norm(tokens, *self.final_ln), axis=1)
        logits = ad.dense(pooled, *self.head)
        return pooled, logits

    def forward(self, x) -> Value:
        return self.features_and_logits(x)[1]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Inference logits for (H, W, C) or (N, H, W, C) arrays."""
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        with ad.no_grad():
            logits = self.forward(x).data
        return logits[0] if squeeze else logits


def cross_entropy(logits: Value, y) -> Value:
    """Mean negative log-likelihood: -log softmax(logits)[y]."""
    logits = ad.as_value(logits)
    y = np.asarray(y, dtype=np.int64)
    if logits.ndim != 2 or y.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy: logits {logits.shape} do not match labels {y.shape}")
    if np.any(y < 0) or np.any(y >= logits.shape[1]):
        raise ValueError(f"labels out of range for {logits.shape[1]} classes")
    return ad.mul(ad.mean(ad.take_per_row(ad.log_softmax(logits), y)), -1.0)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainLog:
    losses: list[tuple[int, float, float]] = field(default_factory=list)  # (step, loss, lr)
    accuracies: list[tuple[int, float, float]] = field(default_factory=list)  # (step, train, eval)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "loss", "lr"])
            for step, loss, lr in self.losses:
                writer.writerow([step, repr(loss), repr(lr)])


@dataclass
class DenoiserBundle:
    model: Denoiser
    norm: NormParams
    schedule_spec: dict
    num_joints: int
    train_log: TrainLog | None = None


@dataclass
class ClassifierBundle:
    model: ActionTransformer
    norm: NormParams
    num_joints: int
    train_log: TrainLog | None = None

    @property
    def num_classes(self) -> int:
        return self.model.cfg.num_classes


def encode_dataset(ds: Dataset, norm: NormParams, image_size: int = 32):
    """Encode every item (resampling to T = J first); returns (images, labels)."""
    if not ds.items:
        raise ValueError("cannot encode an empty dataset")
    images = np.empty((len(ds.items), image_size, image_size, IN_CHANNELS))
    labels = np.empty(len(ds.items), dtype=np.int64)
    for i, seq in enumerate(ds.items):
        if seq.num_frames != seq.num_joints:
            seq = resample_time(seq, seq.num_joints)
        images[i] = encode(seq, norm, image_size=image_size).pixels
        labels[i] = seq.label
    return images, labels


def _collect_grads(params: dict[str, Value]) -> dict[str, np.ndarray]:
    grads = {}
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        grads[name] = p.grad
    return grads


def _zero_grads(params: dict[str, Value]) -> None:
    for p in params.values():
        p.grad = None


def train_denoiser(
    ds: Dataset,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    model_cfg: DenoiserConfig | None = None,
    out_dir=None,
) -> DenoiserBundle:
    """Noise-prediction training: minimize mean((eps - eps_hat)^2) over random (x0, t, eps)."""
    if not ds.items:
        raise ValueError("cannot train on an empty dataset")
    norm = fit_norm_params(ds.items)
    images, _ = encode_dataset(ds, norm)
    model = Denoiser(model_cfg, seed=cfg.seed)
    hyper = AdamWHyper(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, weight_decay=cfg.weight_decay)
    state = adamw_init(model.params, hyper)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xD2)))
    n = images.shape[0]
    log = TrainLog()
    for step in range(1, cfg.iterations + 1):
        idx = rng.integers(0, n, size=cfg.batch_size)
        t = rng.integers(1, sched.num_steps + 1, size=cfg.batch_size)
        eps = rng.standard_normal((cfg.batch_size,) + images.shape[1:])
        x_t = q_sample(images[idx], t, eps, sched)
        pred = model.forward(x_t, t)
        diff = ad.add(pred, -eps)
        loss = ad.mean(ad.mul(diff, diff))
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            raise ad.NonFiniteError(f"denoiser loss became non-finite at step {step}")
        ad.backward(loss)
        adamw_step(model.params, _collect_grads(model.params), state)
        _zero_grads(model.params)
        log.losses.append((step, loss_val, cfg.lr))
        if step == 1 or step % 200 == 0:
            logger.info("denoiser step %d/%d loss %.5f", step, cfg.iterations, loss_val)
        if out_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            bundle = DenoiserBundle(model, norm, _sched_spec(sched), ds.num_joints, log)
            save_model(f"{out_dir}/checkpoint_step{step:06d}.bin", bundle)
    return DenoiserBundle(model, norm, _sched_spec(sched), ds.num_joints, log)


def _accuracy(model: ActionTransformer, images: np.ndarray, labels: np.ndarray, chunk: int = 256) -> float:
    correct = 0
    for start in range(0, images.shape[0], chunk):
        logits = model(images[start : start + chunk])
        correct += int(np.sum(np.argmax(logits, axis=1) == labels[start : start + chunk]))
    return correct / images.shape[0]


def train_classifier(
    ds: Dataset,
    cfg: TrainConfig,
    model_cfg: STTransConfig | None = None,
    eval_ds: Dataset | None = None,
    out_dir=None,
    norm: NormParams | None = None,
) -> ClassifierBundle:
    """Cross-entropy training on clean encoded images (never on noisy latents)."""
    if not ds.items:
        raise ValueError("cannot train on an empty dataset")
    if model_cfg is None:
        model_cfg = STTransConfig(num_classes=ds.num_classes)
    if model_cfg.num_classes != ds.num_classes:
        raise ValueError(f"model has {model_cfg.num_classes} classes, dataset has {ds.num_classes}")
    if norm is None:
        norm = fit_norm_params(ds.items)
    images, labels = encode_dataset(ds, norm)
    eval_images = eval_labels = None
    if eval_ds is not None and eval_ds.items:
        eval_images, eval_labels = encode_dataset(eval_ds, norm)
    model = ActionTransformer(model_cfg, seed=cfg.seed)
    hyper = AdamWHyper(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, weight_decay=cfg.weight_decay)
    state = adamw_init(model.params, hyper)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xC2)))
    n = images.shape[0]
    epoch_len = max(1, n // cfg.batch_size)
    log = TrainLog()
    for step in range(1, cfg.iterations + 1):
        idx = rng.integers(0, n, size=cfg.batch_size)
        logits = model.forward(images[idx])
        loss = cross_entropy(logits, labels[idx])
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            raise ad.NonFiniteError(f"classifier loss became non-finite at step {step}")
        ad.backward(loss)
        adamw_step(model.params, _collect_grads(model.params), state)
        _zero_grads(model.params)
        log.losses.append((step, loss_val, cfg.lr))
        if step % epoch_len == 0 or step == cfg.iterations:
            probe = min(n, 256)
            train_acc = _accuracy(model, images[:probe], labels[:probe])
            eval_acc = (
                _accuracy(model, eval_images, eval_labels) if eval_images is not None else float("nan")
            )
            log.accuracies.append((step, train_acc, eval_acc))
            logger.info(
                "classifier step %d/%d loss %.4f train_acc %.3f eval_acc %s",
                step, cfg.iterations, loss_val, train_acc,
                f"{eval_acc:.3f}" if math.isfinite(eval_acc) else "n/a",
            )
    return ClassifierBundle(model, norm, ds.num_joints, log)


# ---------------------------------------------------------------------------
# persistence: engine checkpoint + model-config manifest


def _sched_spec(sched: NoiseSchedule) -> dict:
    return dict(sched.spec) if sched.spec else {"kind": sched.kind, "t_diff": sched.num_steps}


def save_model(path, bundle: DenoiserBundle | ClassifierBundle, schedule_spec: dict | None = None) -> None:
    if isinstance(bundle, DenoiserBundle):
        extra = {
            "kind": "denoiser",
            "config": asdict(bundle.model.cfg),
            "norm": bundle.norm.to_dict(),
            "num_joints": bundle.num_joints,
            "schedule": schedule_spec or bundle.schedule_spec,
            "seed": bundle.model.seed,
        }
    elif isinstance(bundle, ClassifierBundle):
        extra = {
            "kind": "classifier",
            "config": asdict(bundle.model.cfg),
            "norm": bundle.norm.to_dict(),
            "num_joints": bundle.num_joints,
            "seed": bundle.model.seed,
        }
    else:
        raise TypeError(f"cannot save {type(bundle).__name__}")
    save_checkpoint(bundle.model.params, path, extra=extra)


def load_model(path) -> DenoiserBundle | ClassifierBundle:
    arrays, extra = load_checkpoint(path)
    kind = extra.get("kind")
    norm = NormParams.from_dict(extra["norm"])
    if kind == "denoiser":
        cfg_dict = dict(extra["config"])
        cfg_dict["resolutions"] = tuple(cfg_dict["resolutions"])
        model = Denoiser(DenoiserConfig(**cfg_dict), seed=extra.get("seed", 0))
        bundle = DenoiserBundle(model, norm, extra.get("schedule", {}), extra["num_joints"])
    elif kind == "classifier":
        model = ActionTransformer(STTransConfig(**extra["config"]), seed=extra.get("seed", 0))
        bundle = ClassifierBundle(model, norm, extra["num_joints"])
    else:
        raise ValueError(f"{path}: unknown model kind {kind!r}")
    if set(arrays) != set(model.params):
        missing = set(model.params) - set(arrays)
        surplus = set(arrays) - set(model.params)
        raise ValueError(f"{path}: parameter mismatch (missing {sorted(missing)}, surplus {sorted(surplus)})")
    for name, arr in arrays.items():
        if arr.shape != model.params[name].data.shape:
            raise ValueError(
                f"{path}: shape mismatch for {name!r}: {arr.shape} vs {model.params[name].data.shape}"
            )
        model.params[name].data = arr
    return bundle
