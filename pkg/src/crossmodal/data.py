"""Deterministic synthetic video/audio corpus with a built-in cross-modal signal.

Every leaf class owns a latent pattern ``z``.  A video has a short window of
"event" frames ``P_v z`` on a background, and the audio track has the same
number of event frames ``P_a z``.  Leaf classes are grouped in pairs across
two top-level categories that share one latent pattern: in the first class
the audio event coincides with the video event, in the second it is shifted
so the two windows never overlap.  Each modality on its own therefore sees
the same bag of frames for both classes of a pair; only the alignment of the
two streams tells them apart.

A fraction of examples is made uncorrelated by swapping in the audio track
of a class from another top-level category (labels still follow the video).

Frame matrices are zero-padded to ``frames`` rows after ``true_length``.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .correlation import CorrelationExample, make_negative_pairs, positive_pairs
from .errors import ConfigError, DataError
from .taxonomy import MAX_LEVELS, Taxonomy, expand_labels, load_taxonomy

TOP_LEVEL_NAMES = ("Electronics", "Sports", "Movie", "Art", "Transport", "Food", "Games", "Travel",
                   "Music", "Animal", "News", "Science")
SUBLEVEL_NAMES = ("Alpha", "Beta", "Gamma", "Delta", "Epsilon", "Zeta", "Eta", "Theta")

CORPUS_MAGIC = b"XMCORPUS"
CORPUS_VERSION = 1
SPLITS = ("train", "valid", "test")


@dataclass
class SynthConfig:
    num_top: int = 8
    depth: int = 3
    branching: int = 2
    examples_per_class: int = 200
    frames: int = 30
    video_dim: int = 32
    audio_dim: int = 8
    latent_dim: int = 8
    event_frames: int = 6
    min_length: int = 20
    cross_modal_fraction: float = 0.75
    fraction_uncorrelated: float = 0.1
    noise_sigma: float = 0.5
    split: tuple = (0.7, 0.1, 0.2)
    seed: int = 0

    def validate(self) -> None:
        counts = {
            "num_top": self.num_top, "depth": self.depth, "branching": self.branching,
            "examples_per_class": self.examples_per_class, "frames": self.frames,
            "video_dim": self.video_dim, "audio_dim": self.audio_dim,
            "latent_dim": self.latent_dim, "event_frames": self.event_frames,
            "min_length": self.min_length,
        }
        for name, v in counts.items():
            if int(v) < 1:
                raise ConfigError(f"{name} must be positive, got {v}")
        if self.num_top > len(TOP_LEVEL_NAMES):
            raise ConfigError(f"at most {len(TOP_LEVEL_NAMES)} top-level categories are supported")
        if self.num_top < 2:
            raise ConfigError("need at least two top-level categories")
        if self.depth > MAX_LEVELS:
            raise ConfigError(f"depth {self.depth} exceeds {MAX_LEVELS} levels")
        if self.branching > len(SUBLEVEL_NAMES):
            raise ConfigError(f"branching above {len(SUBLEVEL_NAMES)} is not supported")
        for name in ("cross_modal_fraction", "fraction_uncorrelated"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        if self.min_length > self.frames:
            raise ConfigError(f"min_length {self.min_length} exceeds frame budget {self.frames}")
        if self.min_length < 2 * self.event_frames:
            raise ConfigError("min_length must fit two non-overlapping event windows")
        if self.latent_dim > min(self.video_dim, self.audio_dim):
            raise ConfigError("latent_dim cannot exceed either modality's width")
        if len(self.split) != 3 or any(s < 0 for s in self.split) or abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must be three non-negatives summing to 1, got {self.split}")


@dataclass
class MultiModalExample:
    id: int
    video: np.ndarray  # [T, Dv]
    audio: np.ndarray  # [T, Da]
    true_length: int
    labels: frozenset
    correlated: bool = True
    leaf: int = -1

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.video.shape[0])
        m[: self.true_length] = 1.0
        return m


@dataclass
class Prototypes:
    background_v: np.ndarray
    background_a: np.ndarray
    events_v: np.ndarray  # [G, Dv]
    events_a: np.ndarray  # [G, Da]
    class_group: dict  # leaf id -> group
    class_shifted: dict  # leaf id -> bool
    event_frames: int

    def classes_of_group(self, g: int) -> list[int]:
        return sorted(c for c, grp in self.class_group.items() if grp == g)


@dataclass
class Corpus:
    train: list
    valid: list
    test: list
    taxonomy: Taxonomy
    config: SynthConfig | None = None
    certificate: dict = field(default_factory=dict)
    prototypes: Prototypes | None = None

    def split(self, name: str) -> list:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    @property
    def frames(self) -> int:
        return self.train[0].video.shape[0]

    @property
    def video_dim(self) -> int:
        return self.train[0].video.shape[1]

    @property
    def audio_dim(self) -> int:
        return self.train[0].audio.shape[1]

    def all_examples(self) -> list:
        return [*self.train, *self.valid, *self.test]


def pad_frames(X, T: int) -> tuple[np.ndarray, int]:
    """Append zero rows up to ``T`` frames; returns (padded, true_length)."""
    X = np.asarray(X, dtype=np.float64)
    t = X.shape[0]
    if t > T:
        raise DataError(f"sequence of {t} frames exceeds the budget of {T}; truncate upstream")
    out = np.zeros((T, X.shape[1]))
    out[:t] = X
    return out, t


# -- taxonomy and prototypes -----------------------------------------------------------------


def build_taxonomy(num_top: int, depth: int, branching: int) -> Taxonomy:
    paths = []

    def walk(prefix: str, level: int):
        paths.append(prefix)
        if level + 1 >= depth:
            return
        for i in range(branching):
            walk(f"{prefix}:{SUBLEVEL_NAMES[i]}", level + 1)

    for r in range(num_top):
        walk(TOP_LEVEL_NAMES[r], 0)
    return load_taxonomy(paths)


def _orthonormal(rng, rows: int, cols: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(rows, cols)))
    return q[:, :cols]


def _latents(rng, count: int, dim: int, max_cos: float = 0.5, tries: int = 20000) -> np.ndarray:
    out: list[np.ndarray] = []
    for _ in range(tries):
        if len(out) == count:
            break
        z = rng.normal(size=dim)
        z /= np.linalg.norm(z)
        if all(abs(z @ o) <= max_cos for o in out):
            out.append(z)
    if len(out) < count:
        raise ConfigError(
            f"cannot place {count} distinguishable prototypes in a {dim}-dim latent space"
        )
    return np.array(out)


def _pair_classes(taxonomy: Taxonomy, num_top: int) -> list[tuple[int, int]]:
    """Leaf i of root r paired with leaf i of root r+1, for even r."""
    roots = taxonomy.roots
    leaves_by_root = [sorted(c for c in taxonomy.descendants(r) if not taxonomy.children(c)) for r in roots]
    pairs = []
    for r in range(0, num_top - 1, 2):
        for a, b in zip(leaves_by_root[r], leaves_by_root[r + 1]):
            pairs.append((a, b))
    return pairs


def _make_prototypes(config: SynthConfig, taxonomy: Taxonomy, rng) -> Prototypes:
    leaves = sorted(c for c in taxonomy.ids if not taxonomy.children(c))
    pairs = _pair_classes(taxonomy, config.num_top)
    n_cross = int(round(config.cross_modal_fraction * len(pairs)))
    chosen = set(int(i) for i in rng.permutation(len(pairs))[:n_cross])
    class_group: dict[int, int] = {}
    class_shifted: dict[int, bool] = {}
    g = 0
    for k, (a, b) in enumerate(pairs):
        if k in chosen:
            class_group[a] = class_group[b] = g
            class_shifted[a], class_shifted[b] = False, True
            g += 1
    for leaf in leaves:
        if leaf not in class_group:
            class_group[leaf] = g
            class_shifted[leaf] = False
            g += 1
    z = _latents(rng, g, config.latent_dim)
    P_v = _orthonormal(rng, config.video_dim, config.latent_dim)
    P_a = _orthonormal(rng, config.audio_dim, config.latent_dim)
    scale_v, scale_a = np.sqrt(config.video_dim), np.sqrt(config.audio_dim)
    bg_v = rng.normal(size=config.video_dim)
    bg_a = rng.normal(size=config.audio_dim)
    return Prototypes(
        background_v=0.5 * scale_v * bg_v / np.linalg.norm(bg_v),
        background_a=0.5 * scale_a * bg_a / np.linalg.norm(bg_a),
        events_v=scale_v * z @ P_v.T,
        events_a=scale_a * z @ P_a.T,
        class_group=class_group,
        class_shifted=class_shifted,
        event_frames=config.event_frames,
    )


# -- generation ------------------------------------------------------------------------------------


def _render(length: int, start: int, W: int, event: np.ndarray, background: np.ndarray, T: int,
            sigma: float, rng) -> np.ndarray:
    X = np.zeros((T, event.shape[0]))
    X[:length] = background
    X[start:min(start + W, length)] = event
    if sigma > 0:
        X[:length] += sigma * rng.normal(size=(length, event.shape[0]))
    return X


def _shifted_start(rng, start_v: int, length: int, W: int) -> int:
    options = [s for s in range(0, length - W + 1) if abs(s - start_v) >= W]
    return int(options[rng.integers(len(options))])


def generate_corpus(config: SynthConfig | None = None) -> Corpus:
    """Build taxonomy, prototypes and the train/valid/test split from ``config`` alone."""
    config = config or SynthConfig()
    config.validate()
    rng = np.random.default_rng(config.seed)
    taxonomy = build_taxonomy(config.num_top, config.depth, config.branching)
    protos = _make_prototypes(config, taxonomy, rng)
    T, W, sigma = config.frames, config.event_frames, config.noise_sigma
    leaves = sorted(protos.class_group)
    top = {leaf: taxonomy.ancestors(leaf)[0] for leaf in leaves}
    examples = []
    for leaf in leaves:
        g = protos.class_group[leaf]
        foreign = [c for c in leaves if top[c] != top[leaf] and protos.class_group[c] != g]
        for _ in range(config.examples_per_class):
            length = int(rng.integers(config.min_length, T + 1))
            s_v = int(rng.integers(0, length - W + 1))
            s_a = _shifted_start(rng, s_v, length, W) if protos.class_shifted[leaf] else s_v
            video = _render(length, s_v, W, protos.events_v[g], protos.background_v, T, sigma, rng)
            correlated = bool(rng.random() >= config.fraction_uncorrelated)
            if correlated:
                audio = _render(length, s_a, W, protos.events_a[g], protos.background_a, T, sigma, rng)
            else:
                other = foreign[int(rng.integers(len(foreign)))]
                s_o = int(rng.integers(0, length - W + 1))
                audio = _render(length, s_o, W, protos.events_a[protos.class_group[other]],
                                protos.background_a, T, sigma, rng)
            examples.append(
                MultiModalExample(
                    id=len(examples), video=video, audio=audio, true_length=length,
                    labels=expand_labels([leaf], taxonomy), correlated=correlated, leaf=leaf,
                )
            )
    order = rng.permutation(len(examples))
    n_train = int(round(config.split[0] * len(examples)))
    n_valid = int(round(config.split[1] * len(examples)))
    parts = (order[:n_train], order[n_train:n_train + n_valid], order[n_train + n_valid:])
    train, valid, test = ([examples[i] for i in sorted(p)] for p in parts)
    corpus = Corpus(train, valid, test, taxonomy, config, prototypes=protos)
    corpus.certificate = separability_certificate(examples, protos)
    return corpus


# -- oracles ---------------------------------------------------------------------------------------------


def _assign_frames(frames: np.ndarray, background: np.ndarray, events: np.ndarray) -> np.ndarray:
    """Nearest prototype per frame: 0 = background, g + 1 = event of group g."""
    protos = np.vstack([background[None], events])
    d = ((frames[:, None, :] - protos[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d, axis=1)


def _dominant_group(assign: np.ndarray) -> int:
    ev = assign[assign > 0] - 1
    if ev.size == 0:
        return 0
    counts = np.bincount(ev)
    return int(np.argmax(counts))


def single_modality_oracle(example: MultiModalExample, protos: Prototypes, modality: str = "video") -> int:
    """Nearest-prototype class from one stream; ambiguous pairs resolve to the lower class id."""
    if modality == "video":
        frames, bg, ev = example.video, protos.background_v, protos.events_v
    elif modality == "audio":
        frames, bg, ev = example.audio, protos.background_a, protos.events_a
    else:
        raise ValueError(f"unknown modality {modality!r}")
    g = _dominant_group(_assign_frames(frames[: example.true_length], bg, ev))
    return protos.classes_of_group(g)[0]


def joint_oracle(example: MultiModalExample, protos: Prototypes) -> int:
    """Group from video, then aligned-vs-shifted from the overlap of the two event windows."""
    n = example.true_length
    av = _assign_frames(example.video[:n], protos.background_v, protos.events_v)
    g = _dominant_group(av)
    classes = protos.classes_of_group(g)
    if len(classes) == 1:
        return classes[0]
    aa = _assign_frames(example.audio[:n], protos.background_a, protos.events_a)
    overlap = int(np.sum((av == g + 1) & (aa == g + 1)))
    aligned = [c for c in classes if not protos.class_shifted[c]]
    shifted = [c for c in classes if protos.class_shifted[c]]
    return aligned[0] if overlap * 2 >= protos.event_frames else shifted[0]


def separability_certificate(examples, protos: Prototypes) -> dict:
    """Leaf-class Hit@1 of the single-modality and joint oracles.

    ``cross_*`` entries restrict to examples of classes that share their
    latent pattern with a partner class (where one modality is ambiguous).
    """
    examples = list(examples)
    if not examples:
        return {}
    truth = np.array([ex.leaf for ex in examples])
    video = np.array([single_modality_oracle(ex, protos, "video") for ex in examples])
    audio = np.array([single_modality_oracle(ex, protos, "audio") for ex in examples])
    joint = np.array([joint_oracle(ex, protos) for ex in examples])
    hv, ha, hj = (float((p == truth).mean()) for p in (video, audio, joint))
    single = max(hv, ha)
    cert = {
        "single_video_hit1": hv,
        "single_audio_hit1": ha,
        "single_hit1": single,
        "joint_hit1": hj,
        "joint_advantage": hj - single,
        "n_examples": len(examples),
    }
    cross = np.array([len(protos.classes_of_group(protos.class_group[ex.leaf])) > 1 for ex in examples])
    if cross.any():
        cert["cross_single_hit1"] = max(float((video == truth)[cross].mean()), float((audio == truth)[cross].mean()))
        cert["cross_joint_hit1"] = float((joint == truth)[cross].mean())
        cert["n_cross_examples"] = int(cross.sum())
    return cert


# -- correlation data --------------------------------------------------------------------------------------


def make_correlation_split(examples, taxonomy: Taxonomy, seed: int = 0, neg_ratio: float = 1.0):
    """(positives, negatives) for tower training.

    Positives are the correlated examples' own (video, audio) pairs; the
    negatives mix streams of examples with disjoint top-level labels.
    """
    correlated = [ex for ex in examples if ex.correlated]
    pos = positive_pairs(correlated)
    n_neg = int(round(neg_ratio * len(pos)))
    neg = make_negative_pairs(correlated, taxonomy, seed=seed, count=n_neg)
    return pos, neg


def make_separable_pairs(n: int, video_dim: int, audio_dim: int, seed: int = 0,
                         margin: float = 0.5) -> list[CorrelationExample]:
    """Pairs labelled by a random hyperplane, with a gap of ``margin`` around it."""
    rng = np.random.default_rng(seed)
    w = rng.normal(size=video_dim + audio_dim)
    w /= np.linalg.norm(w)
    out = []
    while len(out) < n:
        x = rng.normal(size=video_dim + audio_dim)
        s = float(x @ w)
        if abs(s) < margin:
            continue
        y = int(s > 0)
        # alternate classes so the set stays balanced
        if y != len(out) % 2:
            continue
        out.append(CorrelationExample(x[:video_dim], x[video_dim:], y))
    return out


# -- batching ---------------------------------------------------------------------------------------------


def stack_examples(examples, num_labels: int) -> dict:
    """Arrays for a list of examples: video, audio, mask, multi-hot targets, ids."""
    examples = list(examples)
    if not examples:
        raise DataError("cannot stack an empty example list")
    video = np.stack([ex.video for ex in examples])
    audio = np.stack([ex.audio for ex in examples])
    mask = np.stack([ex.mask for ex in examples])
    targets = np.zeros((len(examples), num_labels))
    for i, ex in enumerate(examples):
        targets[i, list(ex.labels)] = 1.0
    lengths = np.array([ex.true_length for ex in examples])
    return {"video": video, "audio": audio, "mask": mask, "targets": targets,
            "lengths": lengths, "ids": np.array([ex.id for ex in examples])}


# -- file format ------------------------------------------------------------------------------------------
#
# magic "XMCORPUS" | u16 version | u32 header length | header JSON (utf-8)
# then per example, in split order train/valid/test:
#   u32 id | u8 split | u16 true_length | u8 correlated | i32 leaf | u16 n_labels
#   n_labels x (u16 byte length | utf-8 label path)
#   T*Dv float64 video, T*Da float64 audio (row-major)
# trailer: u32 CRC-32 of every preceding byte.  All integers little-endian.

_REC = struct.Struct("<IBHBiH")


def corpus_bytes(corpus: Corpus) -> bytes:
    tax = corpus.taxonomy
    header = {
        "version": CORPUS_VERSION,
        "frames": corpus.frames,
        "video_dim": corpus.video_dim,
        "audio_dim": corpus.audio_dim,
        "taxonomy": tax.to_text(),
        "counts": [len(corpus.train), len(corpus.valid), len(corpus.test)],
        "config": _config_dict(corpus.config),
        "certificate": corpus.certificate,
    }
    hdr = json.dumps(header, sort_keys=True).encode()
    chunks = [CORPUS_MAGIC, struct.pack("<HI", CORPUS_VERSION, len(hdr)), hdr]
    for split_idx, name in enumerate(SPLITS):
        for ex in corpus.split(name):
            paths = sorted(tax.path(lab) for lab in ex.labels)
            chunks.append(_REC.pack(ex.id, split_idx, ex.true_length, int(ex.correlated), ex.leaf, len(paths)))
            for p in paths:
                b = p.encode()
                chunks.append(struct.pack("<H", len(b)) + b)
            chunks.append(np.ascontiguousarray(ex.video, dtype="<f8").tobytes())
            chunks.append(np.ascontiguousarray(ex.audio, dtype="<f8").tobytes())
    body = b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body))


def _config_dict(config: SynthConfig | None):
    if config is None:
        return None
    d = asdict(config)
    d["split"] = list(d["split"])
    return d


def save_corpus(corpus: Corpus, path) -> None:
    Path(path).write_bytes(corpus_bytes(corpus))


def load_corpus(path) -> Corpus:
    blob = Path(path).read_bytes()
    if len(blob) < len(CORPUS_MAGIC) + 10 or blob[: len(CORPUS_MAGIC)] != CORPUS_MAGIC:
        raise DataError(f"{path}: not a corpus file (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise DataError(f"{path}: checksum mismatch (truncated or corrupted)")
    off = len(CORPUS_MAGIC)
    version, hlen = struct.unpack_from("<HI", body, off)
    if version != CORPUS_VERSION:
        raise DataError(f"{path}: unsupported corpus version {version}")
    off += 6
    header = json.loads(body[off:off + hlen].decode())
    off += hlen
    tax = load_taxonomy(header["taxonomy"])
    T, Dv, Da = header["frames"], header["video_dim"], header["audio_dim"]
    splits: list[list] = [[], [], []]
    try:
        for _ in range(sum(header["counts"])):
            ex_id, split_idx, length, corr, leaf, n_lab = _REC.unpack_from(body, off)
            off += _REC.size
            labels = []
            for _ in range(n_lab):
                (blen,) = struct.unpack_from("<H", body, off)
                off += 2
                labels.append(tax.id_of(body[off:off + blen].decode()))
                off += blen
            video = np.frombuffer(body, dtype="<f8", count=T * Dv, offset=off).reshape(T, Dv).copy()
            off += 8 * T * Dv
            audio = np.frombuffer(body, dtype="<f8", count=T * Da, offset=off).reshape(T, Da).copy()
            off += 8 * T * Da
            splits[split_idx].append(
                MultiModalExample(ex_id, video, audio, length, frozenset(labels), bool(corr), leaf)
            )
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: malformed example record") from exc
    if off != len(body):
        raise DataError(f"{path}: {len(body) - off} trailing bytes")
    cfg = header.get("config")
    config = None
    if cfg is not None:
        cfg["split"] = tuple(cfg["split"])
        config = SynthConfig(**cfg)
    return Corpus(splits[0], splits[1], splits[2], tax, config, header.get("certificate") or {})


def debug_dump(corpus: Corpus, limit: int | None = None) -> str:
    """Human-readable listing of the corpus (frames summarised by their norms)."""
    lines = [
        f"# corpus frames={corpus.frames} video_dim={corpus.video_dim} audio_dim={corpus.audio_dim}",
        f"# certificate {json.dumps(corpus.certificate, sort_keys=True)}",
    ]
    for name in SPLITS:
        for ex in corpus.split(name)[:limit]:
            labels = ",".join(sorted(corpus.taxonomy.path(lab) for lab in ex.labels))
            vn = " ".join(f"{v:.2f}" for v in np.linalg.norm(ex.video, axis=1))
            an = " ".join(f"{v:.2f}" for v in np.linalg.norm(ex.audio, axis=1))
            lines.append(f"{name}\t{ex.id}\tlen={ex.true_length}\tcorr={int(ex.correlated)}\t{labels}")
            lines.append(f"\tvideo_norms {vn}")
            lines.append(f"\taudio_norms {an}")
    return "\n".join(lines) + "\n"
