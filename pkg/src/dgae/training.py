"""Two-stage training: auto-encoder with EMA codebooks, then the
autoregressive prior over the frozen encoder's quantized sequences.

Everything is driven by one ModelConfig so runs are reproducible from
(config, seed) alone. Checkpoints are a single binary file carrying a
config echo, RNG state, step count, and every named tensor.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import codec, prior, quantize
from .autodiff import Tensor, straight_through
from .features import FeatureConfig, augment, feature_widths
from .graphs import Graph


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ModelConfig:
    # data
    node_categories: int = 1
    edge_categories: int = 2
    n_max: int = 20
    seed: int = 0
    holdout_frac: float = 0.2
    # features
    feat_paths: bool = True
    feat_spectral: bool = True
    feat_cycles: bool = True
    feat_random: bool = True
    feat_p: int = 3
    feat_k: int = 4
    feat_d_rand: int = 4
    # encoder / decoder
    gnn_layers: int = 2
    state_width: int = 32
    mlp_hidden: int = 64
    d_latent: int = 16
    # quantizer
    partitions: int = 2
    codebook_size: int = 16
    beta: float = 0.25
    gamma: float = 0.1
    ema_decay: float = 0.99
    ema_eps: float = 1e-5
    t_init: int = 0
    kmeans_samples: int = 10000
    # prior
    blocks: int = 3
    d_model: int = 64
    heads: int = 16
    ffn_layers: int = 4
    # optimization
    batch_size: int = 32
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    lr_decay: float = 0.5
    decay_interval: int = 10000
    clip_norm: float = 5.0
    epochs_ae: int = 200
    epochs_prior: int = 200
    # evaluation
    mmd_sigma: float = 1.0
    clustering_bins: int = 100

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(self.feat_paths, self.feat_spectral, self.feat_cycles,
                             self.feat_random, self.feat_p, self.feat_k, self.feat_d_rand)

    def violations(self):
        v = []
        if self.node_categories < 1:
            v.append("node_categories must be >= 1")
        if self.edge_categories < 2:
            v.append("edge_categories must be >= 2 (category 0 is 'no edge')")
        if self.n_max < 1:
            v.append("n_max must be >= 1")
        if not 0.0 <= self.holdout_frac < 1.0:
            v.append("holdout_frac must be in [0, 1)")
        if not 1 <= self.feat_p <= 3:
            v.append("feat_p must be in {1, 2, 3}")
        if self.feat_spectral and self.feat_k < 1:
            v.append("feat_k must be >= 1 when spectral features are on")
        if self.feat_random and self.feat_d_rand < 0:
            v.append("feat_d_rand must be >= 0")
        if self.gnn_layers < 1:
            v.append("gnn_layers must be >= 1")
        if self.state_width < 1 or self.mlp_hidden < 1 or self.d_latent < 1:
            v.append("widths must be >= 1")
        if self.partitions < 1:
            v.append("partitions must be >= 1")
        if self.d_latent % max(self.partitions, 1) != 0:
            v.append(f"d_latent={self.d_latent} not divisible by partitions={self.partitions}")
        if self.codebook_size < 1:
            v.append("codebook_size must be >= 1")
        if not 0.0 <= self.ema_decay < 1.0:
            v.append("ema_decay must be in [0, 1)")
        if self.ema_eps <= 0:
            v.append("ema_eps must be > 0")
        if self.t_init < 0:
            v.append("t_init must be >= 0")
        if self.kmeans_samples < 1:
            v.append("kmeans_samples must be >= 1")
        if self.blocks < 1:
            v.append("blocks must be >= 1")
        if self.heads < 1 or self.d_model < 1:
            v.append("d_model and heads must be >= 1")
        if self.heads >= 1 and self.d_model % max(self.heads, 1) != 0:
            v.append(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.ffn_layers < 1:
            v.append("ffn_layers must be >= 1")
        if self.batch_size < 1:
            v.append("batch_size must be >= 1")
        if self.lr <= 0:
            v.append("lr must be > 0")
        if not 0.0 < self.lr_decay <= 1.0:
            v.append("lr_decay must be in (0, 1]")
        if self.decay_interval < 1:
            v.append("decay_interval must be >= 1")
        if self.clip_norm <= 0:
            v.append("clip_norm must be > 0")
        if self.epochs_ae < 0 or self.epochs_prior < 0:
            v.append("epoch counts must be >= 0")
        if self.mmd_sigma <= 0:
            v.append("mmd_sigma must be > 0")
        if self.clustering_bins < 1:
            v.append("clustering_bins must be >= 1")
        return v

    def validate(self):
        v = self.violations()
        if v:
            raise ConfigError("invalid config:\n  " + "\n  ".join(v))

    def to_dict(self):
        return dataclasses.asdict(self)


def config_from_dict(d) -> ModelConfig:
    known = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ConfigError("unknown config keys: " + ", ".join(unknown))
    cfg = ModelConfig(**d)
    cfg.validate()
    return cfg


class AutoEncoderModel:
    def __init__(self, cfg: ModelConfig, rng):
        fn, fe = feature_widths(cfg.feature_config(), cfg.node_categories, cfg.edge_categories)
        self.cfg = cfg
        self.encoder = codec.EncoderParams(rng, fn, fe, cfg.state_width, cfg.mlp_hidden,
                                           cfg.gnn_layers, cfg.d_latent)
        self.decoder = codec.DecoderParams(rng, cfg.d_latent, cfg.state_width, cfg.mlp_hidden,
                                           cfg.gnn_layers, cfg.node_categories,
                                           cfg.edge_categories)
        self.codebooks = quantize.CodebookSet(cfg.partitions, cfg.codebook_size, cfg.d_latent,
                                              cfg.ema_decay, cfg.ema_eps)

    def params(self):
        out = self.encoder.params()
        out.update(self.decoder.params())
        return out

    def state_arrays(self):
        out = {name: t.data for name, t in self.params().items()}
        out.update(self.encoder.buffers())
        out.update(self.decoder.buffers())
        cbs = self.codebooks
        for c in range(cbs.C):
            out[f"quant.cb{c}"] = cbs.codebooks[c]
            out[f"quant.count{c}"] = cbs.ema_counts[c]
            out[f"quant.sum{c}"] = cbs.ema_sums[c]
        return out


class PriorModel:
    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        self.params_ = prior.PriorParams(rng, cfg.d_latent, cfg.partitions, cfg.codebook_size,
                                         cfg.d_model, cfg.heads, cfg.blocks, cfg.n_max,
                                         cfg.ffn_layers)

    def params(self):
        return self.params_.params()

    def state_arrays(self):
        return {name: t.data for name, t in self.params().items()}


def _load_state(arrays, tensors, what):
    missing = sorted(set(arrays) - set(tensors))
    extra = sorted(set(tensors) - set(arrays))
    if missing or extra:
        raise ValueError(f"{what} checkpoint mismatch; missing={missing} extra={extra}")
    for name, arr in arrays.items():
        src = tensors[name]
        if src.shape != arr.shape:
            raise ValueError(f"{what} tensor {name}: shape {src.shape} != {arr.shape}")
        arr[...] = src


def load_ae_state(model: AutoEncoderModel, tensors, meta):
    _load_state(model.state_arrays(), {k: v for k, v in tensors.items()
                                       if not k.startswith("prior.")}, "auto-encoder")
    model.codebooks.initialized = bool(meta.get("cb_initialized", False))


def load_prior_state(model: PriorModel, tensors):
    _load_state(model.state_arrays(), {k: v for k, v in tensors.items()
                                       if k.startswith("prior.")}, "prior")


# ---------------------------------------------------------------------------
# checkpoint file format

_CKPT_MAGIC = b"DGAE"
_CKPT_VERSION = 1
_DTYPES = {0: "<f8", 1: "<i8"}
_DTYPE_CODES = {"<f8": 0, "<i8": 1}


def save_checkpoint(path, cfg: ModelConfig, tensors, step, rng_state=None, extra=None):
    """Atomic single-file save: JSON header plus named raw tensors."""
    header = {"config": cfg.to_dict(), "step": int(step),
              "rng_state": rng_state, "extra": extra or {}}
    blob = json.dumps(header, sort_keys=True).encode()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<II", _CKPT_VERSION, len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name])
            code = _DTYPE_CODES.get(arr.dtype.newbyteorder("<").str)
            if code is None:
                raise ValueError(f"tensor {name}: unsupported dtype {arr.dtype}")
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", code, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype(_DTYPES[code], copy=False).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (config, tensors dict, meta dict with step/rng/extra)."""
    with open(path, "rb") as f:
        if f.read(4) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, blob_len = struct.unpack("<II", f.read(8))
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(f.read(blob_len))
        (count,) = struct.unpack("<I", f.read(4))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode()
            code, rank = struct.unpack("<BB", f.read(2))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
            dtype = np.dtype(_DTYPES[code])
            nbytes = int(np.prod(shape)) * dtype.itemsize if rank else dtype.itemsize
            data = f.read(nbytes)
            tensors[name] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
        if f.read(1):
            raise ValueError(f"{path}: trailing bytes after {count} tensors")
    cfg = config_from_dict(header["config"])
    meta = {"step": header["step"], "rng_state": header["rng_state"], **header["extra"]}
    return cfg, tensors, meta


# ---------------------------------------------------------------------------
# optimization

class AdamState:
    def __init__(self, params, beta1=0.9, beta2=0.99, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0


def clip_gradients(params, max_norm):
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for t in params.values():
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    norm = np.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for t in params.values():
            if t.grad is not None:
                t.grad *= scale
    return float(norm)


def adam_step(params, state: AdamState, lr):
    """One bias-corrected Adam update in place; zero grads afterwards.

    Raises TrainingDiverged if any gradient is non-finite.
    """
    state.t += 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name in sorted(params):
        t = params[name]
        g = t.grad
        if g is None:
            raise TrainingDiverged(f"no gradient reached {name}; parameter is "
                                   "disconnected from the loss")
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in {name} at update {state.t}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        t.grad = None


def _lr_at(cfg: ModelConfig, step):
    return cfg.lr * (cfg.lr_decay ** (step // cfg.decay_interval))


# ---------------------------------------------------------------------------
# data plumbing

def featurize_all(graphs, cfg: ModelConfig, seed_stream=None):
    """Augment every graph once, with a per-graph random-feature stream
    spawned from the config seed so the result is order-stable.
    """
    fcfg = cfg.feature_config()
    if seed_stream is None:
        seed_stream = np.random.SeedSequence([cfg.seed, 0xFEA7])
    children = seed_stream.spawn(len(graphs))
    return [augment(g, fcfg, np.random.default_rng(children[i]))
            for i, g in enumerate(graphs)]


def split_dataset(count, cfg: ModelConfig):
    """Deterministic holdout split: (train_idx, val_idx)."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5917]))
    perm = rng.permutation(count)
    k = int(round(count * cfg.holdout_frac))
    return np.sort(perm[k:]), np.sort(perm[:k])


def _batches(order, batch_size):
    for i in range(0, len(order), batch_size):
        yield order[i:i + batch_size]


class MetricsWriter:
    HEADER = "step,loss_recon,loss_commit,nll,perplexity,node_err,edge_err"

    def __init__(self, path):
        self.f = open(path, "w") if path else None
        if self.f:
            self.f.write(self.HEADER + "\n")

    def row(self, step, loss_recon=None, loss_commit=None, nll=None,
            perplexity=None, node_err=None, edge_err=None):
        if not self.f:
            return
        vals = [loss_recon, loss_commit, nll, perplexity, node_err, edge_err]
        cells = [str(step)] + ["" if v is None else format(float(v), ".10g") for v in vals]
        self.f.write(",".join(cells) + "\n")

    def close(self):
        if self.f:
            self.f.close()
            self.f = None


# ---------------------------------------------------------------------------
# stage 1: auto-encoder

def _quantized_latent(model: AutoEncoderModel, z):
    """Quantize encoder output; returns (indices, words, st_tensor)."""
    cbs = model.codebooks
    z_parts = quantize.partition(z.data, cbs.C)
    idx, words = quantize.quantize(z_parts, cbs)
    st = straight_through(z, Tensor(quantize.unpartition(words)))
    return idx, words, st


def _collect_embeddings(model: AutoEncoderModel, aug_train, cfg: ModelConfig):
    """Up to cfg.kmeans_samples valid node embeddings.

    Uses batch statistics (the running buffers are untrained when the
    codebooks are seeded) and restores the buffers afterwards, so
    collection has no side effects.
    """
    buffers = model.encoder.buffers()
    saved = {k: v.copy() for k, v in buffers.items()}
    try:
        rows = []
        total = 0
        for chunk in _batches(np.arange(len(aug_train)), cfg.batch_size):
            batch = codec.prepare_batch([aug_train[i] for i in chunk])
            z = codec.encode(batch, model.encoder, train=True)
            valid = z.data[batch.node_mask]
            rows.append(valid)
            total += valid.shape[0]
            if total >= cfg.kmeans_samples:
                break
    finally:
        for k, v in buffers.items():
            v[...] = saved[k]
    z_all = np.concatenate(rows, axis=0)[:cfg.kmeans_samples]
    return quantize.partition(z_all, cfg.partitions)


def evaluate_autoencoder(model: AutoEncoderModel, aug_val, cfg: ModelConfig):
    """Holdout metrics in eval mode; quantized path once codebooks exist."""
    if not aug_val:
        return {}
    losses, commits, n_errs, e_errs = [], [], [], []
    hist = {}
    for chunk in _batches(np.arange(len(aug_val)), cfg.batch_size):
        batch = codec.prepare_batch([aug_val[i] for i in chunk])
        z = codec.encode(batch, model.encoder, train=False)
        if model.codebooks.initialized:
            idx, words, st = _quantized_latent(model, z)
            valid_idx = idx[batch.node_mask]
            for key, cnt in quantize.tuple_histogram(valid_idx, cfg.codebook_size,
                                                     cfg.partitions).items():
                hist[key] = hist.get(key, 0) + cnt
            commit = quantize.commitment_loss(
                quantize.partition(z, cfg.partitions), words,
                mask=batch.node_mask)
            commits.append(float(commit.data))
            latent = st
        else:
            latent = z
        node_logits, edge_logits = codec.decode(latent, batch.node_mask, model.decoder,
                                                train=False)
        losses.append(float(codec.recon_loss(node_logits, edge_logits, batch).data)
                      * len(chunk))
        ne, ee = codec.error_rates(node_logits, edge_logits, batch)
        n_errs.append(ne * len(chunk))
        e_errs.append(ee * len(chunk))
    n = len(aug_val)
    out = {"loss_recon": sum(losses) / n, "node_err": sum(n_errs) / n,
           "edge_err": sum(e_errs) / n}
    if commits:
        out["loss_commit"] = sum(commits) / len(commits)
    if hist:
        M = cfg.codebook_size ** cfg.partitions
        out["perplexity"] = quantize.perplexity(hist, M)
    return out


def train_autoencoder(graphs, cfg: ModelConfig, metrics_path=None, log=None):
    """Stage 1. Returns (model, history: list of per-epoch dicts)."""
    cfg.validate()
    for g in graphs:
        if g.n > cfg.n_max:
            raise ValueError(f"graph with {g.n} nodes exceeds n_max={cfg.n_max}")
    root = np.random.SeedSequence([cfg.seed, 0xAE])
    init_rng, shuffle_rng, kmeans_rng = [np.random.default_rng(s) for s in root.spawn(3)]

    aug = featurize_all(graphs, cfg)
    train_idx, val_idx = split_dataset(len(graphs), cfg)
    aug_train = [aug[i] for i in train_idx]
    aug_val = [aug[i] for i in val_idx]
    if not aug_train:
        raise ValueError("empty training split")

    model = AutoEncoderModel(cfg, init_rng)
    params = model.params()
    adam = AdamState(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    writer = MetricsWriter(metrics_path)

    history = []
    step = 0
    try:
        for epoch in range(cfg.epochs_ae):
            order = shuffle_rng.permutation(len(aug_train))
            for chunk in _batches(order, cfg.batch_size):
                if not model.codebooks.initialized and step >= cfg.t_init:
                    samples = _collect_embeddings(model, aug_train, cfg)
                    quantize.init_codebooks(model.codebooks, samples, kmeans_rng)
                batch = codec.prepare_batch([aug_train[i] for i in chunk])
                z = codec.encode(batch, model.encoder, train=True)
                if model.codebooks.initialized:
                    cbs = model.codebooks
                    z_parts_np = quantize.partition(z.data, cbs.C)
                    idx, words = quantize.quantize(z_parts_np, cbs)
                    latent = straight_through(z, Tensor(quantize.unpartition(words)))
                    commit = quantize.commitment_loss(
                        quantize.partition(z, cbs.C), words, mask=batch.node_mask)
                else:
                    latent, commit = z, None
                node_logits, edge_logits = codec.decode(latent, batch.node_mask,
                                                        model.decoder, train=True)
                recon = codec.recon_loss(node_logits, edge_logits, batch)
                loss = recon if commit is None else recon + cfg.gamma * cfg.beta * commit
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(f"non-finite loss at step {step}")
                loss.backward()
                clip_gradients(params, cfg.clip_norm)
                adam_step(params, adam, _lr_at(cfg, step))
                if model.codebooks.initialized:
                    quantize.ema_update(model.codebooks, z_parts_np[batch.node_mask],
                                        idx[batch.node_mask])
                step += 1
            metrics = evaluate_autoencoder(model, aug_val, cfg)
            metrics["epoch"] = epoch
            metrics["step"] = step
            history.append(metrics)
            writer.row(step, loss_recon=metrics.get("loss_recon"),
                       loss_commit=metrics.get("loss_commit"),
                       perplexity=metrics.get("perplexity"),
                       node_err=metrics.get("node_err"), edge_err=metrics.get("edge_err"))
            if log:
                log(f"epoch {epoch}: " + " ".join(
                    f"{k}={v:.5f}" for k, v in metrics.items() if k not in ("epoch", "step")))
    finally:
        writer.close()
    if not model.codebooks.initialized and cfg.epochs_ae > 0 and step >= cfg.t_init:
        samples = _collect_embeddings(model, aug_train, cfg)
        quantize.init_codebooks(model.codebooks, samples, kmeans_rng)
    rng_state = shuffle_rng.bit_generator.state
    return model, {"history": history, "step": step, "rng_state": rng_state}


# ---------------------------------------------------------------------------
# stage 2: prior over quantized sequences

def encode_sequences(model: AutoEncoderModel, aug_graphs, cfg: ModelConfig):
    """Deterministic preprocessing: embed, quantize, sort each graph."""
    if not model.codebooks.initialized:
        raise RuntimeError("auto-encoder codebooks are uninitialized; train stage 1 first")
    seqs = []
    for chunk in _batches(np.arange(len(aug_graphs)), cfg.batch_size):
        batch = codec.prepare_batch([aug_graphs[i] for i in chunk])
        z = codec.encode(batch, model.encoder, train=False)
        z_parts = quantize.partition(z.data, cfg.partitions)
        idx, words = quantize.quantize(z_parts, model.codebooks)
        for row, gi in enumerate(chunk):
            n = aug_graphs[gi].n
            seqs.append(prior.sort_set(idx[row, :n], words[row, :n]))
    return seqs


def train_prior(model: AutoEncoderModel, graphs, cfg: ModelConfig,
                metrics_path=None, log=None, cache_path=None):
    """Stage 2. Returns (prior_model, history)."""
    cfg.validate()
    aug = featurize_all(graphs, cfg)
    train_idx, val_idx = split_dataset(len(graphs), cfg)
    seqs = encode_sequences(model, aug, cfg)
    if cache_path:
        prior.write_sequences(cache_path, cfg.codebook_size, cfg.partitions,
                              [s.indices for s in seqs])
    train_seqs = [seqs[i] for i in train_idx]
    val_seqs = [seqs[i] for i in val_idx]

    root = np.random.SeedSequence([cfg.seed, 0xF1])
    init_rng, shuffle_rng = [np.random.default_rng(s) for s in root.spawn(2)]
    pmodel = PriorModel(cfg, init_rng)
    params = pmodel.params()
    adam = AdamState(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    writer = MetricsWriter(metrics_path)

    history = []
    step = 0
    try:
        for epoch in range(cfg.epochs_prior):
            order = shuffle_rng.permutation(len(train_seqs))
            for chunk in _batches(order, cfg.batch_size):
                batch = prior.pack_sequences([train_seqs[i] for i in chunk], cfg.n_max)
                nll = prior.prior_nll(pmodel.params_, batch, train=True)
                if not np.isfinite(nll.data):
                    raise TrainingDiverged(f"non-finite NLL at step {step}")
                nll.backward()
                clip_gradients(params, cfg.clip_norm)
                adam_step(params, adam, _lr_at(cfg, step))
                step += 1
            metrics = {"epoch": epoch, "step": step}
            if val_seqs:
                metrics["nll"] = float(prior.prior_nll(
                    pmodel.params_, prior.pack_sequences(val_seqs, cfg.n_max),
                    train=False).data)
            history.append(metrics)
            writer.row(step, nll=metrics.get("nll"))
            if log and "nll" in metrics:
                log(f"epoch {epoch}: nll={metrics['nll']:.5f}")
    finally:
        writer.close()
    rng_state = shuffle_rng.bit_generator.state
    return pmodel, {"history": history, "step": step, "rng_state": rng_state}


# ---------------------------------------------------------------------------
# generation: prior samples decoded back to graphs

def decode_sequences(model: AutoEncoderModel, samples, cfg: ModelConfig, chunk_size=256):
    """Decode sampled index sequences to graphs (eval mode, mode decode)."""
    graphs_out = []
    cbs = model.codebooks
    for lo in range(0, len(samples), chunk_size):
        part = samples[lo:lo + chunk_size]
        sizes = [s.shape[0] for s in part]
        n = max(sizes)
        B = len(part)
        z = np.zeros((B, n, cfg.d_latent))
        mask = np.zeros((B, n), dtype=bool)
        for b, s in enumerate(part):
            words = np.stack([cbs.codebooks[c][s[:, c]] for c in range(cbs.C)], axis=1)
            z[b, :s.shape[0]] = quantize.unpartition(words)
            mask[b, :s.shape[0]] = True
        node_logits, edge_logits = codec.decode(z, mask, model.decoder, train=False)
        for b, s in enumerate(part):
            k = sizes[b]
            graphs_out.append(codec.sample_graph(node_logits.data[b, :k],
                                                 edge_logits.data[b, :k, :k]))
    return graphs_out


def generate_graphs(model: AutoEncoderModel, pmodel: PriorModel, cfg: ModelConfig,
                    count, seed, step_times=None):
    """Sample index sequences from the prior and decode them."""
    samples = prior.generate(pmodel.params_, model.codebooks.codebooks, count, seed,
                             n_max=cfg.n_max, step_times=step_times)
    idx_seqs = [s["indices"] for s in samples]
    graphs_out = decode_sequences(model, idx_seqs, cfg)
    truncated = sum(1 for s in samples if s["truncated"])
    return graphs_out, {"truncated": truncated}


def full_state_arrays(model: AutoEncoderModel, pmodel: PriorModel | None = None):
    out = model.state_arrays()
    if pmodel is not None:
        out.update(pmodel.state_arrays())
    return out
