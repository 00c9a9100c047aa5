"""Training loop, evaluation, ensembling, checkpoints, gradcheck harness.

One iteration: forward every sequence of the batch (logits, pooled feature,
adaptive graph), project the graph to v, compute cross-entropy plus the
bank-sampled contrastive loss, take an SGD step (momentum + weight decay +
step decay), and only THEN push the batch's embeddings into the banks — an
anchor never contrasts against its own current embedding. With lam == 0 the
contrast branch (projection, sampling, banks, its RNG stream) is skipped
entirely, which makes the baseline ablation exact rather than approximate.

Determinism: every random choice draws from a stream seeded as
[seed, stream_id] (data/test/init/shuffle/contrast), so runs with the same
config reproduce bit-identically and toggling the contrast branch cannot
perturb data order or initialization.
"""

from __future__ import annotations

import hashlib
import struct
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import banks as banks_mod
from . import contrast as contrast_mod
from . import diagnostics as diag
from .data import (MODALITIES, Dataset, SkeletonTopology, default_topology,
                   derive_dataset, generate_synthetic, load_dataset)
from .encoder import (EncoderArch, cross_entropy, forward, init_encoder_params,
                      softmax_probs)
from .errors import (BadConfigError, ConfigHashMismatchError,
                     ModalityMismatchError, NonFiniteError)
from .projection import init_projection_params, project_graph

# rng stream ids (offsets under the run seed)
_STREAM_DATA = 0
_STREAM_INIT = 2
_STREAM_SHUFFLE = 3
_STREAM_CONTRAST = 4


@dataclass
class TrainConfig:
    # data: either a dataset file or the synthetic generator
    dataset_path: str | None = None
    test_dataset_path: str | None = None
    modality: str = "joint"
    class_count: int = 6
    per_class: int = 80
    test_per_class: int = 20
    frames: int = 16
    joints: int = 8
    channels: int = 3
    # model
    block_channels: tuple = (8, 16, 32)
    kernel: int = 5
    attn_channels: int = 4
    embed_dim: int = 64          # C_g
    bank_capacity: int = 64      # P
    # optimization
    epochs: int = 30
    batch_size: int = 16
    lr: float = 0.02             # stable for the normalization-free stack; >=0.05 risks ReLU death
    momentum: float = 0.9
    weight_decay: float = 4e-4
    seed: int = 1
    # sampling counts larger than a pool take the whole pool, so the stock
    # counts behave sensibly on synthetic-size banks
    contrast: contrast_mod.ContrastConfig = field(
        default_factory=contrast_mod.ContrastConfig)
    out_dir: str | None = None

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise BadConfigError(f"unknown modality {self.modality!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise BadConfigError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise BadConfigError("lr must be positive")
        if self.bank_capacity < 1 or self.embed_dim < 1:
            raise BadConfigError("bank_capacity and embed_dim must be >= 1")
        self.block_channels = tuple(int(c) for c in self.block_channels)


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    loss_ce: float
    loss_nce: float
    train_acc: float
    test_acc: float | None
    seconds: float

    def key_tuple(self):
        """Deterministic fields only — wall-clock seconds excluded."""
        return (self.epoch, self.loss, self.loss_ce, self.loss_nce,
                self.train_acc, self.test_acc)


@dataclass
class TrainResult:
    params: dict
    arch: EncoderArch
    config: TrainConfig
    metrics: list
    instance_bank: banks_mod.InstanceBank | None
    semantic_bank: banks_mod.SemanticBank | None
    train_dataset: Dataset
    test_dataset: Dataset | None
    contrast_seconds: float
    total_seconds: float

    @property
    def contrast_overhead(self) -> float:
        """Fraction of training wall time spent in the contrast branch."""
        return self.contrast_seconds / self.total_seconds \
            if self.total_seconds > 0 else 0.0


def _load_or_generate(config: TrainConfig):
    if config.dataset_path:
        train_ds = load_dataset(config.dataset_path, split="train")
        test_ds = load_dataset(config.test_dataset_path, split="test") \
            if config.test_dataset_path else None
    else:
        # same data seed for both splits: class structure is shared, the
        # split tag alone separates the sampled sequences
        train_ds = generate_synthetic(
            config.class_count, config.per_class, frames=config.frames,
            joints=config.joints, channels=config.channels,
            seed=[config.seed, _STREAM_DATA], split="train")
        test_ds = generate_synthetic(
            config.class_count, config.test_per_class, frames=config.frames,
            joints=config.joints, channels=config.channels,
            seed=[config.seed, _STREAM_DATA], split="test") \
            if config.test_per_class > 0 else None
    if config.modality != "joint":
        topo = default_topology(train_ds.sequences[0].num_joints)
        train_ds = derive_dataset(train_ds, topo, config.modality)
        if test_ds is not None:
            test_ds = derive_dataset(test_ds, topo, config.modality)
    return train_ds, test_ds


def build_arch(config: TrainConfig, dataset: Dataset) -> EncoderArch:
    t, n, c = dataset.sequences[0].frames.shape
    return EncoderArch(default_topology(n), dataset.class_count,
                       in_channels=c, block_channels=config.block_channels,
                       kernel=config.kernel, attn_channels=config.attn_channels)


def init_params(config: TrainConfig, arch: EncoderArch) -> dict:
    rng = np.random.default_rng([config.seed, _STREAM_INIT])
    params = init_encoder_params(arch, rng)
    params.update(init_projection_params(3, arch.joints, config.embed_dim, rng))
    return params


def _lr_at(config: TrainConfig, epoch: int) -> float:
    # step decay x0.1 entering 50% and 75% of the epoch budget
    scale = 1.0
    if epoch >= config.epochs // 2:
        scale *= 0.1
    if epoch >= (3 * config.epochs) // 4:
        scale *= 0.1
    return config.lr * scale


def batch_loss(tensors, samples, arch, config: TrainConfig,
               inst_snap, sem_snap, contrast_rng, record=None):
    """Scalar loss tensor for one batch: mean CE + lam * mean contrast loss.

    `record`, when given, is filled with per-sample side data the training
    loop needs afterwards (prediction, detached embedding, timing).
    """
    lam = config.contrast.lam
    use_contrast = lam != 0.0 and inst_snap is not None
    ce_sum, nce_sum = None, None
    for seq in samples:
        out = forward(seq, tensors, arch)
        ce = cross_entropy(out.logits, seq.label)
        ce_sum = ce if ce_sum is None else ad.add(ce_sum, ce)
        pred = int(np.argmax(out.logits.data))
        embedding = None
        if use_contrast:
            t0 = time.perf_counter()
            v = project_graph(out.graph, tensors["proj.W_G"])
            sets = contrast_mod.sample_sets(inst_snap, sem_snap, v.data,
                                            seq.label, config.contrast,
                                            contrast_rng)
            nce = contrast_mod.contrast_loss(v, sets, config.contrast)
            nce_sum = nce if nce_sum is None else ad.add(nce_sum, nce)
            embedding = v.data.copy()
            if record is not None:
                record["contrast_seconds"] += time.perf_counter() - t0
        if record is not None:
            record["predictions"].append(pred)
            record["labels"].append(seq.label)
            record["embeddings"].append(embedding)

    count = float(len(samples))
    ce_mean = ad.mul(ce_sum, 1.0 / count)
    if not use_contrast:
        if record is not None:
            record["ce"] = float(ce_mean.data)
            record["nce"] = 0.0
        return ce_mean
    nce_mean = ad.mul(nce_sum, 1.0 / count)
    if record is not None:
        record["ce"] = float(ce_mean.data)
        record["nce"] = float(nce_mean.data)
    return contrast_mod.total_loss(ce_mean, nce_mean, lam)


def train(config: TrainConfig, train_ds: Dataset | None = None,
          test_ds: Dataset | None = None) -> TrainResult:
    if train_ds is None:
        train_ds, generated_test = _load_or_generate(config)
        if test_ds is None:
            test_ds = generated_test
    arch = build_arch(config, train_ds)
    params = init_params(config, arch)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}

    lam = config.contrast.lam
    inst_bank = banks_mod.InstanceBank(train_ds.class_count,
                                       config.bank_capacity) if lam else None
    sem_bank = banks_mod.SemanticBank(train_ds.class_count,
                                      config.embed_dim) if lam else None
    shuffle_rng = np.random.default_rng([config.seed, _STREAM_SHUFFLE])
    contrast_rng = np.random.default_rng([config.seed, _STREAM_CONTRAST])

    metrics = []
    contrast_seconds = 0.0
    t_train0 = time.perf_counter()
    step = 0
    n = len(train_ds.sequences)
    for epoch in range(config.epochs):
        t_epoch0 = time.perf_counter()
        lr = _lr_at(config, epoch)
        order = shuffle_rng.permutation(n)
        sum_ce = sum_nce = 0.0
        correct = 0
        for start in range(0, n, config.batch_size):
            batch_idx = order[start:start + config.batch_size]
            samples = [train_ds.sequences[i] for i in batch_idx]
            record = {"predictions": [], "labels": [], "embeddings": [],
                      "contrast_seconds": 0.0}
            if lam:
                inst_snap = banks_mod.snapshot(inst_bank)
                sem_snap = banks_mod.snapshot(sem_bank)
            else:
                inst_snap = sem_snap = None

            def fn(tensors):
                return batch_loss(tensors, samples, arch, config,
                                  inst_snap, sem_snap, contrast_rng, record)

            try:
                _, grads = ad.forward_backward(fn, params)
                for name in params:
                    g = grads[name] + config.weight_decay * params[name]
                    velocity[name] = config.momentum * velocity[name] + g
                    params[name] -= lr * velocity[name]
            except NonFiniteError as e:
                raise NonFiniteError(f"training aborted at step {step}: {e}") from e

            if lam:
                t0 = time.perf_counter()
                for emb, label in zip(record["embeddings"], record["labels"]):
                    # push AFTER the optimizer step: the anchor never sees
                    # its own current embedding in the bank
                    banks_mod.push_instance(inst_bank, emb, label)
                    banks_mod.update_semantic(sem_bank, emb, label,
                                              config.contrast.alpha)
                record["contrast_seconds"] += time.perf_counter() - t0
            contrast_seconds += record["contrast_seconds"]

            bsz = len(samples)
            sum_ce += record["ce"] * bsz
            sum_nce += record["nce"] * bsz
            correct += sum(int(p == y) for p, y in
                           zip(record["predictions"], record["labels"]))
            step += 1

        test_acc = None
        if test_ds is not None:
            test_acc = evaluate(params, arch, test_ds, embed=False).accuracy
        metrics.append(EpochMetrics(
            epoch=epoch,
            loss=sum_ce / n + lam * (sum_nce / n),
            loss_ce=sum_ce / n,
            loss_nce=sum_nce / n,
            train_acc=correct / n,
            test_acc=test_acc,
            seconds=time.perf_counter() - t_epoch0))

    return TrainResult(params=params, arch=arch, config=config,
                       metrics=metrics, instance_bank=inst_bank,
                       semantic_bank=sem_bank, train_dataset=train_ds,
                       test_dataset=test_ds,
                       contrast_seconds=contrast_seconds,
                       total_seconds=time.perf_counter() - t_train0)


@dataclass
class EvalResult:
    accuracy: float
    per_class: dict
    predictions: np.ndarray
    labels: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    features: np.ndarray
    embeddings: np.ndarray | None   # projected graph embeddings v
    raw_graphs: np.ndarray | None   # flattened adaptive graphs


def evaluate(params, arch: EncoderArch, dataset: Dataset,
             embed: bool = True) -> EvalResult:
    """Test-time path: plain forwards, argmax predictions. No banks, no
    contrast sampling, no parameter mutation — embeddings come straight from
    the projection head for diagnostics."""
    tensors = {k: ad.as_tensor(np.asarray(v)) for k, v in params.items()}
    preds, labels, logits, probs, feats = [], [], [], [], []
    embeddings, raw_graphs = [], []
    for seq in dataset.sequences:
        out = forward(seq, tensors, arch)
        z = out.logits.data
        preds.append(int(np.argmax(z)))  # argmax ties -> lowest class index
        labels.append(seq.label)
        logits.append(z.copy())
        probs.append(softmax_probs(z))
        feats.append(out.feature.data.copy())
        if embed:
            v = project_graph(out.graph, tensors["proj.W_G"])
            embeddings.append(v.data.copy())
            raw_graphs.append(out.graph.data.reshape(-1).copy())
    preds = np.array(preds, dtype=np.intp)
    labels = np.array(labels, dtype=np.intp)
    return EvalResult(
        accuracy=float(np.mean(preds == labels)),
        per_class=diag.per_class_accuracy(preds, labels, dataset.class_count),
        predictions=preds, labels=labels,
        logits=np.stack(logits), probs=np.stack(probs),
        features=np.stack(feats),
        embeddings=np.stack(embeddings) if embed else None,
        raw_graphs=np.stack(raw_graphs) if embed else None)


def ensemble_eval(models, dataset: Dataset) -> EvalResult:
    """Equal-weight softmax-score ensemble across per-modality models.

    `models` is a list of (params, arch, modality); `dataset` must provide
    the joint stream, from which each model's modality is derived.
    """
    if any(s.modality != "joint" for s in dataset.sequences):
        raise ModalityMismatchError("ensemble needs the joint stream as input")
    seen = set()
    for _, _, modality in models:
        if modality not in MODALITIES:
            raise ModalityMismatchError(f"unknown modality {modality!r}")
        if modality in seen:
            raise ModalityMismatchError(f"duplicate modality {modality!r}")
        seen.add(modality)

    total_probs = None
    for params, arch, modality in models:
        stream = dataset if modality == "joint" \
            else derive_dataset(dataset, arch.topology, modality)
        result = evaluate(params, arch, stream, embed=False)
        total_probs = result.probs if total_probs is None \
            else total_probs + result.probs
    preds = np.argmax(total_probs, axis=1)
    labels = dataset.labels()
    return EvalResult(
        accuracy=float(np.mean(preds == labels)),
        per_class=diag.per_class_accuracy(preds, labels, dataset.class_count),
        predictions=preds, labels=labels, logits=total_probs,
        probs=total_probs / len(models), features=np.zeros((len(labels), 0)),
        embeddings=None, raw_graphs=None)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"SKCP"
_CKPT_VERSION = 1


def _arch_lines(arch: EncoderArch, modality: str, embed_dim: int) -> list:
    return [
        f"modality {modality}",
        f"class_count {arch.class_count}",
        f"in_channels {arch.in_channels}",
        f"block_channels {','.join(str(c) for c in arch.block_channels)}",
        f"kernel {arch.kernel}",
        f"attn_channels {arch.attn_channels}",
        f"embed_dim {embed_dim}",
        f"parent {','.join(str(p) for p in arch.topology.parent)}",
    ]


def config_hash(arch: EncoderArch, modality: str, embed_dim: int) -> str:
    text = "\n".join(_arch_lines(arch, modality, embed_dim))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class CheckpointMeta:
    arch: EncoderArch
    modality: str
    embed_dim: int
    hash: str


def save_checkpoint(path, params: dict, arch: EncoderArch, modality: str,
                    embed_dim: int):
    """Manifest (hash, arch fields, named shapes) + float64 blobs in
    declaration order."""
    lines = [f"hash {config_hash(arch, modality, embed_dim)}"]
    lines += _arch_lines(arch, modality, embed_dim)
    for name, arr in params.items():
        shape = "x".join(str(d) for d in np.asarray(arr).shape)
        lines.append(f"param {name} {shape}")
    manifest = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<II", _CKPT_VERSION, len(manifest)))
        f.write(manifest)
        for arr in params.values():
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path, expect_hash: str | None = None):
    """-> (params, CheckpointMeta). Bit-exact inverse of save_checkpoint."""
    with open(path, "rb") as f:
        if f.read(4) != _CKPT_MAGIC:
            raise BadConfigError(f"{path} is not a checkpoint file")
        version, mlen = struct.unpack("<II", f.read(8))
        if version != _CKPT_VERSION:
            raise BadConfigError(f"unsupported checkpoint version {version}")
        manifest = f.read(mlen).decode("utf-8").strip().split("\n")
        fields, param_specs = {}, []
        for line in manifest:
            key, _, value = line.partition(" ")
            if key == "param":
                name, _, shape = value.partition(" ")
                dims = tuple(int(d) for d in shape.split("x")) if shape else ()
                param_specs.append((name, dims))
            else:
                fields[key] = value
        params = {}
        for name, dims in param_specs:
            count = int(np.prod(dims)) if dims else 1
            blob = f.read(count * 8)
            params[name] = np.frombuffer(blob, dtype="<f8").reshape(dims).copy()

    arch = EncoderArch(
        SkeletonTopology([int(p) for p in fields["parent"].split(",")]),
        int(fields["class_count"]),
        in_channels=int(fields["in_channels"]),
        block_channels=tuple(int(c) for c in fields["block_channels"].split(",")),
        kernel=int(fields["kernel"]),
        attn_channels=int(fields["attn_channels"]))
    embed_dim = int(fields["embed_dim"])
    meta = CheckpointMeta(arch, fields["modality"], embed_dim, fields["hash"])
    actual = config_hash(arch, meta.modality, embed_dim)
    if actual != meta.hash:
        raise ConfigHashMismatchError("checkpoint manifest hash is inconsistent")
    if expect_hash is not None and expect_hash != meta.hash:
        raise ConfigHashMismatchError(
            f"checkpoint was written for a different configuration "
            f"(expected {expect_hash[:12]}..., found {meta.hash[:12]}...)")
    return params, meta


# ---------------------------------------------------------------------------
# gradient-check harness over the full training loss
# ---------------------------------------------------------------------------

def gradcheck_full_loss(class_count=3, joints=4, frames=6, block_channels=(4, 6),
                        embed_dim=16, batch=2, bank_entries=5, seed=0,
                        epsilon=1e-5, tolerance=1e-4):
    """check_gradients over CE + lam * contrast on a toy model with
    pre-seeded banks; returns the GradCheckReport."""
    config = TrainConfig(class_count=class_count, per_class=2, test_per_class=0,
                         frames=frames, joints=joints,
                         block_channels=block_channels, kernel=3,
                         embed_dim=embed_dim, epochs=1, batch_size=batch,
                         seed=seed,
                         contrast=contrast_mod.ContrastConfig(
                             k_hard_pos=3, k_hard_neg=4, k_rand_neg=3))
    ds = generate_synthetic(class_count, 2, frames=frames, joints=joints,
                            seed=[seed, _STREAM_DATA])
    arch = build_arch(config, ds)
    params = init_params(config, arch)
    rng = np.random.default_rng([seed, 7])
    # random classifier so CE gradient reaches the whole encoder stack
    params["classifier.W"] = rng.normal(size=params["classifier.W"].shape) * 0.3

    inst = banks_mod.InstanceBank(class_count, capacity=16)
    sem = banks_mod.SemanticBank(class_count, embed_dim)
    for c in range(class_count):
        for _ in range(bank_entries):
            banks_mod.push_instance(inst, rng.normal(size=embed_dim), c)
        banks_mod.update_semantic(sem, rng.normal(size=embed_dim), c, 0.85)
    inst_snap, sem_snap = banks_mod.snapshot(inst), banks_mod.snapshot(sem)
    samples = ds.sequences[:batch]

    def fn(tensors):
        # re-seeded every evaluation so FD perturbations see one sampler path
        return batch_loss(tensors, samples, arch, config, inst_snap, sem_snap,
                          np.random.default_rng([seed, 8]))

    return ad.check_gradients(fn, params, epsilon=epsilon, tolerance=tolerance)
