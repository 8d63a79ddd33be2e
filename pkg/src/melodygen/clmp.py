"""Tri-modal contrastive alignment of text, waveform, and melody.

The two heavy encoders are replaced by deterministic featurizers (hashed
token bag for text, per-bin mel statistics for audio); only small projection
heads, a melody token embedder, and a temperature are trained. The loss is
standard InfoNCE, one directed term per ordered modality pair (six terms,
averaged), with a single learnable temperature shared by all terms and
parameterized as exp(log_tau) so positivity is structural.

Convention: similarities are divided by tau (logits = <a, b> / tau), and
log_tau is initialized to log(0.07).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import smallnet
from .errors import ShapeError, ValidationError
from .melody_codec import MelodyTripletSeq, N_BINS, parse_pitch
from .signal import MelGrid

TEXT_DIM = 256
_TEXT_HASH_KEY = b"melodygen.text.v1"  # fixed: featurization must never drift

MODALITIES = ("text", "waveform", "melody")
DIRECTIONS = ("W2T", "T2W", "W2M", "M2W", "T2M", "M2T")

_TOKEN_FEATURE_DIM = 128 + 2  # one-hot pitch + scaled duration/rest bins


@dataclass
class Embedding:
    values: np.ndarray
    modality: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.modality not in MODALITIES:
            raise ValidationError(f"unknown modality {self.modality!r}")
        norm = np.linalg.norm(self.values)
        if abs(norm - 1.0) > 1e-6:
            raise ValidationError(f"embedding must be unit-norm, got ||v|| = {norm}")


@dataclass
class Triple:
    """One aligned corpus item: caption, melody tokens, mel grid."""

    id: str
    text: str
    melody: MelodyTripletSeq
    mel: MelGrid


def _stable_hash(token: str) -> int:
    h = hashlib.blake2b(token.encode("utf-8"), key=_TEXT_HASH_KEY, digest_size=8)
    return int.from_bytes(h.digest(), "little")


def _tokenize(text: str) -> list[str]:
    # lowercase words; '#' kept so note names like f#5 stay one token
    out, cur = [], []
    for ch in text.lower():
        if ch.isalnum() or ch == "#":
            cur.append(ch)
        elif cur:
            out.append("".join(cur))
            cur = []
    if cur:
        out.append("".join(cur))
    return out


def featurize_text(text: str) -> np.ndarray:
    """Hashed bag of unigrams + bigrams, signed, L2-normalized, dim 256."""
    tokens = _tokenize(text)
    if not tokens:
        raise ValidationError("text has no tokens")
    grams = list(tokens) + [f"{a} {b}" for a, b in zip(tokens, tokens[1:])]
    v = np.zeros(TEXT_DIM)
    for g in grams:
        h = _stable_hash(g)
        sign = 1.0 if (h >> 63) & 1 else -1.0
        v[h % TEXT_DIM] += sign
    norm = np.linalg.norm(v)
    if norm > 0:
        v /= norm
    return v


def featurize_wave(mel: MelGrid) -> np.ndarray:
    """Per-mel-bin mean and std over frames, concatenated and L2-normalized."""
    mean = mel.values.mean(axis=0)
    std = mel.values.std(axis=0)
    v = np.concatenate([mean, std])
    norm = np.linalg.norm(v)
    if norm > 0:
        v /= norm
    return v


def melody_token_features(seq: MelodyTripletSeq) -> np.ndarray:
    """(L, 130): one-hot pitch plus duration/rest bins scaled to [0, 1]."""
    if len(seq) == 0:
        raise ValidationError("cannot featurize an empty melody")
    feats = np.zeros((len(seq), _TOKEN_FEATURE_DIM))
    for i, t in enumerate(seq):
        feats[i, parse_pitch(t.pitch_token)] = 1.0
        feats[i, 128] = t.duration_bin / (N_BINS - 1)
        feats[i, 129] = t.rest_bin / (N_BINS - 1)
    return feats


@dataclass
class ClmpModel:
    text_head: smallnet.DenseNet
    wave_head: smallnet.DenseNet
    melody_token_embed: smallnet.DenseNet
    melody_head: smallnet.DenseNet
    log_tau: np.ndarray  # shape (1,)
    embed_dim: int

    @classmethod
    def create(
        cls,
        embed_dim: int = 64,
        wave_dim: int = 128,
        hidden: int = 128,
        token_embed_dim: int = 32,
        seed: int = 0,
    ) -> "ClmpModel":
        rng = smallnet.spawn_rng(seed, 101)
        return cls(
            text_head=smallnet.DenseNet.create([TEXT_DIM, hidden, embed_dim], "tanh", rng),
            wave_head=smallnet.DenseNet.create([wave_dim, hidden, embed_dim], "tanh", rng),
            melody_token_embed=smallnet.DenseNet.create(
                [_TOKEN_FEATURE_DIM, token_embed_dim], ["identity"], rng
            ),
            melody_head=smallnet.DenseNet.create([token_embed_dim, hidden, embed_dim], "tanh", rng),
            log_tau=np.array([np.log(0.07)]),
            embed_dim=embed_dim,
        )

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau[0]))

    def parameters(self) -> list[np.ndarray]:
        return (
            self.text_head.parameters()
            + self.wave_head.parameters()
            + self.melody_token_embed.parameters()
            + self.melody_head.parameters()
            + [self.log_tau]
        )

    def parameter_names(self) -> list[str]:
        return (
            self.text_head.parameter_names("text_head.")
            + self.wave_head.parameter_names("wave_head.")
            + self.melody_token_embed.parameter_names("melody_token_embed.")
            + self.melody_head.parameter_names("melody_head.")
            + ["log_tau"]
        )

    def save(self, path) -> None:
        arrays: dict[str, np.ndarray] = {"log_tau": self.log_tau}
        meta: dict = {"embed_dim": self.embed_dim, "nets": {}}
        for name, net in self._nets().items():
            a, m = smallnet.net_state(net, prefix=f"{name}.")
            arrays.update(a)
            meta["nets"][name] = m
        smallnet.save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "ClmpModel":
        arrays, meta = smallnet.load_checkpoint(path)
        nets = {
            name: smallnet.net_from_state(arrays, meta["nets"][name], prefix=f"{name}.")
            for name in ("text_head", "wave_head", "melody_token_embed", "melody_head")
        }
        return cls(log_tau=arrays["log_tau"].copy(), embed_dim=int(meta["embed_dim"]), **nets)

    def _nets(self) -> dict[str, smallnet.DenseNet]:
        return {
            "text_head": self.text_head,
            "wave_head": self.wave_head,
            "melody_token_embed": self.melody_token_embed,
            "melody_head": self.melody_head,
        }


def _normalize_rows(h: np.ndarray):
    norms = np.linalg.norm(h, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ValidationError("cannot normalize a zero embedding")
    return h / norms, norms


def _normalize_rows_backward(h: np.ndarray, y: np.ndarray, norms: np.ndarray, dy: np.ndarray):
    # y = h / ||h||; dL/dh = (dy - y * <y, dy>) / ||h||
    inner = np.sum(y * dy, axis=1, keepdims=True)
    return (dy - y * inner) / norms


class _HeadPath:
    """Forward/backward for features -> head -> unit-normalized embedding."""

    def __init__(self, head: smallnet.DenseNet, feats: np.ndarray):
        self.head = head
        raw, self.cache = head.forward_cached(feats)
        self.raw = raw if raw.ndim == 2 else raw[None, :]
        self.emb, self.norms = _normalize_rows(self.raw)

    def backward(self, d_emb: np.ndarray):
        d_raw = _normalize_rows_backward(self.raw, self.emb, self.norms, d_emb)
        grads, d_feats = self.head.backward_cached(self.cache, d_raw)
        return grads, d_feats


class _MelodyPath:
    """Token features -> token embed net -> mean pool -> head -> normalize."""

    def __init__(self, model: ClmpModel, melodies: list[np.ndarray]):
        self.model = model
        self.lengths = np.array([len(m) for m in melodies])
        flat = np.concatenate(melodies, axis=0)
        tok, self.tok_cache = model.melody_token_embed.forward_cached(flat)
        self.tok = tok
        bounds = np.concatenate([[0], np.cumsum(self.lengths)])
        pooled = np.stack(
            [tok[bounds[i]:bounds[i + 1]].mean(axis=0) for i in range(len(melodies))]
        )
        self.bounds = bounds
        self.head_path = _HeadPath(model.melody_head, pooled)
        self.emb = self.head_path.emb

    def backward(self, d_emb: np.ndarray):
        head_grads, d_pooled = self.head_path.backward(d_emb)
        d_tok = np.zeros_like(self.tok)
        for i in range(len(self.lengths)):
            d_tok[self.bounds[i]:self.bounds[i + 1]] = d_pooled[i] / self.lengths[i]
        embed_grads, _ = self.model.melody_token_embed.backward_cached(self.tok_cache, d_tok)
        return embed_grads, head_grads


def encode(model: ClmpModel, modality: str, payload) -> Embedding:
    """Embed one item. ``payload`` is a feature vector for text/waveform
    (from the featurizers) or a MelodyTripletSeq for melody."""
    if modality == "text":
        path = _HeadPath(model.text_head, np.asarray(payload, dtype=np.float64)[None, :])
    elif modality == "waveform":
        path = _HeadPath(model.wave_head, np.asarray(payload, dtype=np.float64)[None, :])
    elif modality == "melody":
        if not isinstance(payload, MelodyTripletSeq):
            raise ValidationError("melody payload must be a MelodyTripletSeq")
        path = _MelodyPath(model, [melody_token_features(payload)])
    else:
        raise ValidationError(f"unknown modality {modality!r}")
    return Embedding(path.emb[0], modality)


def _directed_infonce(sim: np.ndarray, tau: float):
    """L = -(1/N) sum_i log softmax_j(sim_ij / tau)_i.

    Returns (loss, dL/dsim, dL/dlog_tau_contribution).
    """
    n = sim.shape[0]
    logits = sim / tau
    m = logits.max(axis=1, keepdims=True)
    logz = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    loss = float(np.mean(logz - np.diag(logits)))
    p = np.exp(logits - logz[:, None])
    dlogits = (p - np.eye(n)) / n
    d_sim = dlogits / tau
    d_log_tau = float(np.sum(dlogits * (-logits)))
    return loss, d_sim, d_log_tau


# ordered (query, candidate) modality pairs: the six directed loss terms
_PAIR_ORDER = (("m", "w"), ("w", "m"), ("w", "t"), ("t", "w"), ("t", "m"), ("m", "t"))


class _BatchGraph:
    """One contrastive batch: all three encode paths plus the total loss."""

    def __init__(self, model: ClmpModel, text_feats, wave_feats, melody_feats,
                 use_melody_terms: bool = True):
        self.model = model
        self.use_melody_terms = use_melody_terms
        self.text = _HeadPath(model.text_head, text_feats)
        self.wave = _HeadPath(model.wave_head, wave_feats)
        self.melody = _MelodyPath(model, melody_feats)

    def loss_and_grads(self):
        model = self.model
        tau = model.tau
        emb = {"t": self.text.emb, "w": self.wave.emb, "m": self.melody.emb}
        if self.use_melody_terms:
            pairs = _PAIR_ORDER
        else:
            pairs = (("w", "t"), ("t", "w"))
        d_emb = {k: np.zeros_like(v) for k, v in emb.items()}
        total = 0.0
        d_log_tau = 0.0
        scale = 1.0 / len(pairs)
        for a, b in pairs:
            loss, d_sim, d_lt = _directed_infonce(emb[a] @ emb[b].T, tau)
            total += scale * loss
            d_emb[a] += scale * (d_sim @ emb[b])
            d_emb[b] += scale * (d_sim.T @ emb[a])
            d_log_tau += scale * d_lt

        text_grads, _ = self.text.backward(d_emb["t"])
        wave_grads, _ = self.wave.backward(d_emb["w"])
        embed_grads, melody_head_grads = self.melody.backward(d_emb["m"])
        grads = (
            text_grads + wave_grads + embed_grads + melody_head_grads
            + [np.array([d_log_tau])]
        )
        return total, grads


def _batch_features(model: ClmpModel, batch: list[Triple]):
    text = np.stack([featurize_text(t.text) for t in batch])
    wave = np.stack([featurize_wave(t.mel) for t in batch])
    melody = [melody_token_features(t.melody) for t in batch]
    return text, wave, melody


def contrastive_total_loss(model: ClmpModel, batch: list[Triple],
                           use_melody_terms: bool = True) -> float:
    """Mean of the directed InfoNCE terms over a batch of aligned triples."""
    if len(batch) < 2:
        raise ValidationError(f"contrastive batch needs N >= 2, got {len(batch)}")
    text, wave, melody = _batch_features(model, batch)
    graph = _BatchGraph(model, text, wave, melody, use_melody_terms)
    loss, _ = graph.loss_and_grads()
    return loss


@dataclass
class ClmpTrainConfig:
    batch_size: int = 48
    epochs: int = 30
    learning_rate: float = 1e-5
    seed: int = 0
    use_melody_terms: bool = True


@dataclass
class TrainResult:
    model: ClmpModel
    loss_curve: list[float] = field(default_factory=list)


def train_clmp(model: ClmpModel, corpus: list[Triple], config: ClmpTrainConfig) -> TrainResult:
    """Batch-gradient training with Adam; loss recorded per epoch.

    Features are computed once up front (they are deterministic). Epoch order
    is a seeded shuffle; a trailing partial batch is dropped so every step
    sees exactly ``batch_size`` items.
    """
    if len(corpus) < config.batch_size:
        raise ValidationError(
            f"corpus has {len(corpus)} items, need at least batch_size={config.batch_size}"
        )
    text = np.stack([featurize_text(t.text) for t in corpus])
    wave = np.stack([featurize_wave(t.mel) for t in corpus])
    melody = [melody_token_features(t.melody) for t in corpus]

    rng = smallnet.spawn_rng(config.seed, 202)
    opt = smallnet.Optimizer(kind="adam", learning_rate=config.learning_rate)
    params = model.parameters()
    names = model.parameter_names()
    curve = []
    n_batches = len(corpus) // config.batch_size
    for _ in range(config.epochs):
        order = rng.permutation(len(corpus))
        epoch_loss = 0.0
        for b in range(n_batches):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            graph = _BatchGraph(
                model, text[idx], wave[idx], [melody[i] for i in idx],
                config.use_melody_terms,
            )
            loss, grads = graph.loss_and_grads()
            opt.step(params, grads, names)
            epoch_loss += loss
        curve.append(epoch_loss / n_batches)
    return TrainResult(model=model, loss_curve=curve)


def embed_corpus(model: ClmpModel, triples: list[Triple]):
    """(text, wave, melody) embedding matrices for an item list."""
    text = np.stack([featurize_text(t.text) for t in triples])
    wave = np.stack([featurize_wave(t.mel) for t in triples])
    melody = [melody_token_features(t.melody) for t in triples]
    return (
        _HeadPath(model.text_head, text).emb,
        _HeadPath(model.wave_head, wave).emb,
        _MelodyPath(model, melody).emb,
    )


def eval_retrieval(model: ClmpModel, triples: list[Triple],
                   directions: tuple[str, ...] = DIRECTIONS) -> dict:
    """R@1/5/10 and mAP@10 per direction; the true mate is the same item.

    mAP@10 is mean(1/rank) with rank > 10 scored as 0 (one relevant item per
    query). Ranks count strictly-greater similarities, so exact ties do not
    push the mate down.
    """
    if len(triples) < 10:
        raise ValidationError(f"evaluation set needs >= 10 items, got {len(triples)}")
    t, w, m = embed_corpus(model, triples)
    emb = {"T": t, "W": w, "M": m}
    out = {}
    for d in directions:
        if len(d) != 3 or d[0] not in emb or d[2] not in emb:
            raise ValidationError(f"unknown retrieval direction {d!r}")
        q, c = emb[d[0]], emb[d[2]]
        sims = q @ c.T
        diag = np.diag(sims)
        ranks = 1 + (sims > diag[:, None]).sum(axis=1)
        out[d] = {
            "r1": float(np.mean(ranks <= 1)),
            "r5": float(np.mean(ranks <= 5)),
            "r10": float(np.mean(ranks <= 10)),
            "map10": float(np.mean(np.where(ranks <= 10, 1.0 / ranks, 0.0))),
        }
    return out
