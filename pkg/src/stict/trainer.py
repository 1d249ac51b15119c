"""Mean-teacher training loop.

A student network is optimized with Adam; a teacher with identical
structure tracks it as an exponential moving average of the parameters and
provides the consistency targets. Labeled and unlabeled mini-batches run
through separate forward passes so normalization statistics stay
domain-tagged; all loss terms are summed into one optimizer step.

Checkpoint format (little-endian throughout): magic "STCK", u32 version=1,
u32 entry count, then per entry u16 name length, UTF-8 name, u8 rank,
rank x u32 dims, float32 values; trailer: u32 epoch, u32 step, u64 adam
step count, 16-byte PCG64 state, 16-byte PCG64 increment, u32 has_uint32,
u32 uinteger.
"""

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import ict
from . import losses as L
from . import tensor as T
from .data import VideoClip
from .ict import FlowField, FrameTriplet
from .sanet import ModelConfig, SANet
from .tensor import Tensor

CKPT_MAGIC = b"STCK"
CKPT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 3e-3
    batch_labeled: int = 4
    batch_unlabeled: int = 4
    ema_decay: float = 0.999
    k: int = 1
    lam_t: float = 0.5
    lcs_window: int = 3
    scheme: str = "si"
    use_sic: bool = True
    use_tic: bool = True
    use_sc: bool = True
    sic_all_frames: bool = True
    ppa_window: int = 7
    seed: int = 0
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self):
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema decay {self.ema_decay} outside [0, 1)")
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ValueError("batch sizes must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.k < 1:
            raise ValueError("k must be positive")
        if not 0.0 <= self.lam_t <= 1.0:
            raise ValueError(f"lam_t {self.lam_t} outside [0, 1]")
        if self.scheme not in ict.SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        self.weights.validate()
        self.model.validate()
        return self

    @property
    def any_unsupervised(self):
        return self.use_sic or self.use_tic or self.use_sc


class Adam:
    """Adam over named parameters; moments are float32 state arrays."""

    def __init__(self, named_params):
        self.named_params = list(named_params)
        self.m = {n: np.zeros_like(p.data) for n, p in self.named_params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.named_params}
        self.t = 0

    def step(self, lr):
        self.t += 1
        b1c = 1.0 - ADAM_BETA1**self.t
        b2c = 1.0 - ADAM_BETA2**self.t
        for name, p in self.named_params:
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype)
            m = self.m[name] = ADAM_BETA1 * self.m[name] + (1 - ADAM_BETA1) * g
            v = self.v[name] = ADAM_BETA2 * self.v[name] + (1 - ADAM_BETA2) * g * g
            p.data = p.data - lr * (m / b1c) / (np.sqrt(v / b2c) + ADAM_EPS)


@dataclass
class TrainerState:
    student: SANet
    teacher: SANet
    optimizer: Adam
    config: TrainConfig
    epoch: int = 0
    step: int = 0
    rng: np.random.Generator = None


def init_state(config):
    """Fresh student, teacher as an exact copy, empty optimizer moments."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    student = SANet(config.model, rng)
    teacher = SANet(config.model, np.random.default_rng(0))
    for (_, sp), (_, tp) in zip(student.named_parameters(), teacher.named_parameters()):
        tp.data = sp.data.copy()
    for (name, sb), _ in zip(student.named_buffers(), teacher.named_buffers()):
        mod, leaf = teacher.buffer_owner(name)
        mod.set_buffer(leaf, sb.copy())
    opt = Adam(student.named_parameters())
    return TrainerState(student, teacher, opt, config, rng=rng)


def ema_update(state, decay=None):
    """theta_teacher <- decay * theta_teacher + (1 - decay) * theta_student.

    Parameters only; the teacher's normalization statistics evolve through
    its own domain-tagged forward passes.
    """
    eta = state.config.ema_decay if decay is None else decay
    for (_, sp), (_, tp) in zip(state.student.named_parameters(), state.teacher.named_parameters()):
        tp.data = eta * tp.data + (1.0 - eta) * sp.data
    return state


def learning_rate(config, epoch):
    """Linear decay, exactly lr0 * (1 - epoch/epochs)."""
    return config.lr * (1.0 - epoch / config.epochs)


def _teacher_outputs(teacher, frame, domain="unlabeled"):
    with T.no_grad():
        return teacher.forward(Tensor(frame), domain)


def _sic_frame_loss(state, frame):
    """Spatial consistency on one batch of frames, scheme-dispatched."""
    cfg = state.config
    if cfg.scheme == "ri-rgb":
        plan = ict.lcs_plan(frame, cfg.lcs_window, state.rng, scheme="ri-rgb")
        with T.no_grad():
            shuf = ict.apply_shuffle(Tensor(frame), plan)
            mixed = ict.mix(Tensor(frame), shuf, plan.lam)
            t_orig = state.teacher.forward(Tensor(frame), "unlabeled")
            t_shuf = state.teacher.forward(shuf, "unlabeled")
        s_out = state.student.forward(Tensor(mixed.data), "unlabeled")
        lam = plan.lam_at(s_out.r_final.shape[2:])
        return L.sic_loss(s_out.r_final, t_orig.r_final, t_shuf.r_final, lam)

    with T.no_grad():
        t_pyr = state.teacher.encode(Tensor(frame), "unlabeled")
        scheme = "si" if cfg.scheme == "si" else "ri-feature"
        plan = ict.lcs_plan(t_pyr.deepest, cfg.lcs_window, state.rng, scheme=scheme)
        t_shuf = ict.apply_shuffle(t_pyr.deepest, plan)
        t_orig_out = state.teacher.decode_from_deep(t_pyr.deepest, t_pyr.skips, "unlabeled")
        t_shuf_out = state.teacher.decode_from_deep(t_shuf, t_pyr.skips, "unlabeled")
    s_pyr = state.student.encode(Tensor(frame), "unlabeled")
    s_shuf = ict.apply_shuffle(s_pyr.deepest, plan)
    s_mix = ict.mix(s_pyr.deepest, s_shuf, plan.lam)
    s_out = state.student.decode_from_deep(s_mix, s_pyr.skips, "unlabeled")
    lam = plan.lam_at(s_out.r_final.shape[2:])
    return L.sic_loss(s_out.r_final, t_orig_out.r_final, t_shuf_out.r_final, lam)


def train_step(state, labeled_batch, triplet_batch, config=None):
    """One optimization step; returns (state, LossBreakdown).

    labeled_batch: (frames (B,3,H,W), masks (B,1,H,W)). triplet_batch: a
    FrameTriplet batch or None when every consistency loss is off.
    """
    cfg = config or state.config
    state.student.train()
    state.teacher.train()

    x_l, y_l = labeled_batch
    sup = L.supervised_loss(state.student.forward(Tensor(x_l), "labeled"), y_l, cfg.ppa_window)

    sic = tic = sc = None
    if triplet_batch is not None and cfg.any_unsupervised:
        trip = triplet_batch
        if cfg.use_sic:
            frames = [trip.prev, trip.cur, trip.next] if cfg.sic_all_frames else [trip.cur]
            terms = [_sic_frame_loss(state, f) for f in frames]
            sic = terms[0]
            for t_ in terms[1:]:
                sic = T.add(sic, t_)
            sic = T.multiply(sic, 1.0 / len(terms))

        s_cur = None
        if cfg.use_tic or cfg.use_sc:
            s_cur = state.student.forward(Tensor(trip.cur), "unlabeled")
        if cfg.use_tic:
            t_prev = _teacher_outputs(state.teacher, trip.prev)
            t_next = _teacher_outputs(state.teacher, trip.next)
            target = ict.temporal_target(t_prev.r_final, t_next.r_final, trip)
            tic = L.tic_loss(s_cur.r_final, target)
        if cfg.use_sc:
            t_cur = _teacher_outputs(state.teacher, trip.cur)
            sc = L.sc_loss(s_cur.r_scales, t_cur.r_scales)
    elif cfg.any_unsupervised and cfg.use_tic:
        raise ValueError("temporal consistency enabled but no triplet batch supplied")

    beta = L.ramp(state.epoch, cfg.weights)
    total, breakdown = L.total_loss(sup, sic, tic, sc, beta, cfg.weights)

    state.student.zero_grad()
    total.backward()
    state.optimizer.step(learning_rate(cfg, state.epoch))
    ema_update(state)
    state.step += 1
    return state, breakdown


# -- batching ---------------------------------------------------------------


def _compose_flow(first, then):
    """Chain two flows: total(p) = first(p) + then(p + first(p))."""
    with T.no_grad():
        carried = T.warp(Tensor(then), first).data
    return first + carried


def triplet_from_clip(clip, t, k):
    """Cut the (t-k, t, t+k) triplet with composed flows for k > 1."""
    if not (k <= t <= clip.length - 1 - k):
        raise ValueError(f"t={t} outside valid range [{k}, {clip.length - 1 - k}]")
    fb = clip.bwd(t)[None].copy()
    ff = clip.fwd(t)[None].copy()
    for j in range(1, k):
        fb = _compose_flow(fb, clip.bwd(t - j)[None])
        ff = _compose_flow(ff, clip.fwd(t + j)[None])
    return (
        clip.frames[t - k : t - k + 1],
        clip.frames[t : t + 1],
        clip.frames[t + k : t + k + 1],
        fb,
        ff,
    )


def make_triplet_batch(dataset, picks, k, lam_t):
    """Stack (video, t) picks into one batched FrameTriplet."""
    prevs, curs, nexts, fbs, ffs = [], [], [], [], []
    for vi, t in picks:
        p, c, n, fb, ff = triplet_from_clip(dataset.videos[vi], t, k)
        prevs.append(p)
        curs.append(c)
        nexts.append(n)
        fbs.append(fb)
        ffs.append(ff)
    return FrameTriplet(
        prev=np.concatenate(prevs),
        cur=np.concatenate(curs),
        next=np.concatenate(nexts),
        flow_bwd=FlowField(np.concatenate(fbs)),
        flow_fwd=FlowField(np.concatenate(ffs)),
        lam_t=lam_t,
        k=k,
    )


def triplet_pool(dataset, k):
    pool = []
    for vi, clip in enumerate(dataset.videos):
        pool.extend((vi, t) for t in range(k, clip.length - k))
    return pool


def run_training(state, dataset, log_rows=None, on_epoch_end=None):
    """Epochs loop: labeled order and triplet picks are drawn from the
    trainer rng, so a fixed seed reproduces the run bitwise."""
    cfg = state.config
    n_labeled = len(dataset.labeled)
    if n_labeled == 0:
        raise ValueError("dataset has no labeled samples")
    use_unlabeled = cfg.any_unsupervised
    if use_unlabeled and not dataset.videos:
        raise ValueError("consistency losses enabled but the dataset has no videos")
    pool = triplet_pool(dataset, cfg.k) if use_unlabeled else []
    if use_unlabeled and not pool:
        raise ValueError(f"no valid triplet positions for k={cfg.k}")

    frames = np.stack([s.frame for s in dataset.labeled])
    masks = np.stack([s.mask for s in dataset.labeled])

    while state.epoch < cfg.epochs:
        order = state.rng.permutation(n_labeled)
        epoch_pool = list(state.rng.permutation(len(pool))) if pool else []
        cursor = 0
        for start in range(0, n_labeled, cfg.batch_labeled):
            idx = order[start : start + cfg.batch_labeled]
            batch = (frames[idx], masks[idx])
            trip = None
            if use_unlabeled:
                picks = []
                for _ in range(cfg.batch_unlabeled):
                    if cursor >= len(epoch_pool):
                        cursor = 0  # cycle the per-epoch shuffle
                    picks.append(pool[epoch_pool[cursor]])
                    cursor += 1
                trip = make_triplet_batch(dataset, picks, cfg.k, cfg.lam_t)
            _, breakdown = train_step(state, batch, trip)
            if log_rows is not None:
                log_rows.append(breakdown.csv_row(state.step, state.epoch))
        state.epoch += 1
        if on_epoch_end is not None:
            on_epoch_end(state)
    return state


# -- checkpointing -----------------------------------------------------------


def _state_entries(state):
    """Ordered (name, float32 array) view of everything worth persisting."""
    entries = []
    for prefix, model in (("student", state.student), ("teacher", state.teacher)):
        for name, p in model.named_parameters():
            entries.append((f"{prefix}.p.{name}", p.data))
        for name, b in model.named_buffers():
            entries.append((f"{prefix}.b.{name}", b))
    for name, _ in state.optimizer.named_params:
        entries.append((f"opt.m.{name}", state.optimizer.m[name]))
        entries.append((f"opt.v.{name}", state.optimizer.v[name]))
    return entries


def save_checkpoint(state, path):
    entries = _state_entries(state)
    bg = state.rng.bit_generator.state
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(entries)))
        for name, arr in entries:
            arr32 = np.ascontiguousarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr32.ndim))
            f.write(struct.pack(f"<{arr32.ndim}I", *arr32.shape))
            f.write(arr32.tobytes())
        f.write(struct.pack("<IIQ", state.epoch, state.step, state.optimizer.t))
        f.write(int(bg["state"]["state"]).to_bytes(16, "little"))
        f.write(int(bg["state"]["inc"]).to_bytes(16, "little"))
        f.write(struct.pack("<II", int(bg["has_uint32"]), int(bg["uinteger"])))


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes for {what} at offset {f.tell() - len(buf)}")
    return buf


def read_checkpoint(path):
    """Parse a checkpoint into (entries dict, trailer dict)."""
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != CKPT_MAGIC:
            raise CheckpointError("bad checkpoint magic at offset 0")
        version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        entries = {}
        order = []
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(f, 1, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, f"dims of {name}"))
            n = int(np.prod(dims)) if rank else 1
            raw = _read_exact(f, 4 * n, f"values of {name}")
            entries[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
            order.append(name)
        epoch, step, adam_t = struct.unpack("<IIQ", _read_exact(f, 16, "counters"))
        rng_state = int.from_bytes(_read_exact(f, 16, "rng state"), "little")
        rng_inc = int.from_bytes(_read_exact(f, 16, "rng increment"), "little")
        has_u32, uint = struct.unpack("<II", _read_exact(f, 8, "rng tail"))
        extra = f.read(1)
        if extra:
            raise CheckpointError(f"trailing bytes after trailer at offset {f.tell() - 1}")
    trailer = {
        "epoch": epoch,
        "step": step,
        "adam_t": adam_t,
        "rng": {"state": rng_state, "inc": rng_inc, "has_uint32": has_u32, "uinteger": uint},
    }
    return entries, order, trailer


def load_checkpoint(path, config):
    """Rebuild a TrainerState for `config` from a checkpoint; any name or
    shape disagreement is rejected naming the first mismatched entry."""
    state = init_state(config)
    entries, order, trailer = read_checkpoint(path)
    expected = _state_entries(state)
    expected_names = [n for n, _ in expected]
    if order != expected_names:
        for got, want in zip(order + [None], expected_names + [None]):
            if got != want:
                raise CheckpointError(f"checkpoint/config mismatch: file has {got!r}, model expects {want!r}")
    for name, arr in expected:
        stored = entries[name]
        if stored.shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {name}: file {stored.shape}, model {arr.shape}")

    def put(model, kind, name, value):
        if kind == "p":
            dict(model.named_parameters())[name].data = value
        else:
            mod, leaf = model.buffer_owner(name)
            mod.set_buffer(leaf, value)

    for name, arr in entries.items():
        scope, kind, rest = name.split(".", 2)
        if scope in ("student", "teacher"):
            put(state.student if scope == "student" else state.teacher, kind, rest, arr)
        elif scope == "opt":
            (state.optimizer.m if kind == "m" else state.optimizer.v)[rest] = arr
    state.epoch = trailer["epoch"]
    state.step = trailer["step"]
    state.optimizer.t = trailer["adam_t"]
    bg = state.rng.bit_generator.state
    bg["state"]["state"] = trailer["rng"]["state"]
    bg["state"]["inc"] = trailer["rng"]["inc"]
    bg["has_uint32"] = trailer["rng"]["has_uint32"]
    bg["uinteger"] = trailer["rng"]["uinteger"]
    state.rng.bit_generator.state = bg
    return state
