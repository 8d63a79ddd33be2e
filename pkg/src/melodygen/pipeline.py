"""End-to-end orchestration: corpus -> alignment -> index -> codec ->
diffusion -> generation -> evaluation.

All stages read and write artifacts under a single working directory:

    workdir/
      corpus/manifest.jsonl, corpus/wav/*.wav
      clmp.json            alignment model checkpoint
      melody.index         HNSW database   (+ melody.index.ids.json id map)
      latentcodec.json     mel <-> latent codec checkpoint
      diffusion.json       denoiser + condition fusion checkpoint
      generated/           per-generation wav / mel / latent files

Splits are positional: the last ``corpus.eval_count`` records are held out of
every training stage and drive evaluation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import clmp, diffusion, latentcodec, melody_vdb, metrics, signal, smallnet
from .config import PipelineConfig
from .corpus import CorpusRecord, generate_corpus, load_corpus
from .errors import MissingArtifactError, ValidationError


@dataclass
class Artifacts:
    root: Path

    def __init__(self, root):
        self.root = Path(root)

    @property
    def corpus_dir(self) -> Path:
        return self.root / "corpus"

    @property
    def manifest(self) -> Path:
        return self.corpus_dir / "manifest.jsonl"

    @property
    def clmp_path(self) -> Path:
        return self.root / "clmp.json"

    @property
    def index_path(self) -> Path:
        return self.root / "melody.index"

    @property
    def index_ids_path(self) -> Path:
        return self.root / "melody.index.ids.json"

    @property
    def latent_path(self) -> Path:
        return self.root / "latentcodec.json"

    @property
    def diffusion_path(self) -> Path:
        return self.root / "diffusion.json"

    @property
    def generated_dir(self) -> Path:
        return self.root / "generated"

    def require(self, *paths: Path) -> None:
        for p in paths:
            if not p.exists():
                raise MissingArtifactError(
                    f"missing artifact {p.name} (expected at {p}); run the earlier "
                    "pipeline stages first"
                )


@dataclass
class GenerationResult:
    prompt: str
    retrieved_melody_id: str | None
    latent_path: str
    mel_path: str
    wav_path: str
    sampler: dict

    def to_dict(self) -> dict:
        return {
            "prompt": self.prompt,
            "retrieved_melody_id": self.retrieved_melody_id,
            "latent_path": self.latent_path,
            "mel_path": self.mel_path,
            "wav_path": self.wav_path,
            "sampler": self.sampler,
        }


# --- corpus and features -----------------------------------------------------


def run_synth_data(cfg: PipelineConfig, workdir) -> list[CorpusRecord]:
    art = Artifacts(workdir)
    return generate_corpus(
        cfg.corpus.n_records,
        cfg.seed,
        art.corpus_dir,
        sample_rate=cfg.signal.sample_rate,
        clip_samples=cfg.signal.clip_samples,
    )


def _load_records(cfg: PipelineConfig, art: Artifacts) -> list[CorpusRecord]:
    art.require(art.manifest)
    result = load_corpus(art.manifest)
    if result.errors:
        bad = ", ".join(f"{e.record_id}: {e.message}" for e in result.errors[:3])
        raise ValidationError(f"corpus has invalid records ({bad})")
    return result.records


def record_mel(cfg: PipelineConfig, art: Artifacts, record: CorpusRecord) -> signal.MelGrid:
    wave = signal.read_wav(art.corpus_dir / record.wav_path)
    return signal.mel_spectrogram(
        wave, n_mels=cfg.signal.n_mels, n_fft=cfg.signal.n_fft, hop=cfg.signal.hop
    )


def build_triples(cfg: PipelineConfig, art: Artifacts,
                  records: list[CorpusRecord]) -> list[clmp.Triple]:
    return [
        clmp.Triple(id=r.id, text=r.text, melody=r.melody, mel=record_mel(cfg, art, r))
        for r in records
    ]


def _split(cfg: PipelineConfig, items: list):
    n_eval = cfg.corpus.eval_count
    if n_eval == 0:
        return items, []
    return items[:-n_eval], items[-n_eval:]


# --- training stages ----------------------------------------------------------


def run_train_clmp(cfg: PipelineConfig, workdir) -> clmp.TrainResult:
    art = Artifacts(workdir)
    records = _load_records(cfg, art)
    train_records, _ = _split(cfg, records)
    triples = build_triples(cfg, art, train_records)
    model = clmp.ClmpModel.create(
        embed_dim=cfg.clmp.embed_dim,
        wave_dim=2 * cfg.signal.n_mels,
        hidden=cfg.clmp.hidden,
        token_embed_dim=cfg.clmp.token_embed_dim,
        seed=cfg.seed,
    )
    result = clmp.train_clmp(model, triples, clmp.ClmpTrainConfig(
        batch_size=cfg.clmp.batch_size,
        epochs=cfg.clmp.epochs,
        learning_rate=cfg.clmp.learning_rate,
        seed=cfg.seed,
    ))
    model.save(art.clmp_path)
    return result


def _load_clmp(cfg: PipelineConfig, art: Artifacts) -> clmp.ClmpModel:
    art.require(art.clmp_path)
    return clmp.ClmpModel.load(art.clmp_path)


def run_build_index(cfg: PipelineConfig, workdir) -> melody_vdb.HnswIndex:
    """Embed every training melody and insert it into a fresh HNSW database."""
    art = Artifacts(workdir)
    records = _load_records(cfg, art)
    train_records, _ = _split(cfg, records)
    model = _load_clmp(cfg, art)
    index = melody_vdb.HnswIndex(
        dim=cfg.clmp.embed_dim,
        M=cfg.hnsw.M,
        ef_construction=cfg.hnsw.ef_construction,
        seed=cfg.seed,
    )
    ids = []
    for i, record in enumerate(train_records):
        emb = clmp.encode(model, "melody", record.melody)
        index.insert(i, emb.values)
        ids.append(record.id)
    melody_vdb.persist(index, art.index_path)
    with open(art.index_ids_path, "w", encoding="utf-8") as f:
        json.dump({"ids": ids}, f)
    return index


def _load_index(art: Artifacts):
    art.require(art.index_path, art.index_ids_path)
    index = melody_vdb.restore(art.index_path)
    with open(art.index_ids_path, "r", encoding="utf-8") as f:
        ids = json.load(f)["ids"]
    return index, ids


def run_train_latent(cfg: PipelineConfig, workdir) -> list[float]:
    art = Artifacts(workdir)
    records = _load_records(cfg, art)
    train_records, _ = _split(cfg, records)
    mels = [record_mel(cfg, art, r) for r in train_records]
    model = latentcodec.LatentCodecModel.create(
        compression=cfg.latent.compression,
        channels=cfg.latent.channels,
        hidden=cfg.latent.hidden,
        kl_weight=cfg.latent.kl_weight,
        seed=cfg.seed,
        mel_params={
            "frame_hop": cfg.signal.hop,
            "n_fft": cfg.signal.n_fft,
            "f_min": 0.0,
            "f_max": cfg.signal.sample_rate / 2,
            "sample_rate": cfg.signal.sample_rate,
        },
    )
    history = latentcodec.train_latentcodec(model, mels, latentcodec.LatentTrainConfig(
        steps=cfg.latent.steps,
        batch_size=cfg.latent.batch_size,
        learning_rate=cfg.latent.learning_rate,
        seed=cfg.seed,
    ))
    model.save(art.latent_path)
    return history


def _latent_shape(cfg: PipelineConfig) -> tuple[int, int, int]:
    r = cfg.latent.compression
    return cfg.latent.channels, cfg.signal.mel_frames // r, cfg.signal.n_mels // r


def _fuse_rows(fusion: diffusion.ConditionFusion, queries: np.ndarray,
               melodies: np.ndarray) -> np.ndarray:
    return np.concatenate([queries, melodies], axis=1) @ fusion.W + fusion.b


def run_train_diffusion(cfg: PipelineConfig, workdir) -> list[float]:
    """Train the conditional denoiser on corpus latents.

    Conditioning follows the two-phase recipe: for the first
    ``phase_split`` fraction of steps the query embedding is the record's
    waveform embedding, afterwards its text embedding; in both phases the
    melody half of the condition is the top-1 database hit for that query.
    Retrievals are precomputed (queries are fixed per record), and condition
    dropout trains the null vector for guidance.
    """
    art = Artifacts(workdir)
    records = _load_records(cfg, art)
    train_records, _ = _split(cfg, records)
    model = _load_clmp(cfg, art)
    index, _ = _load_index(art)
    art.require(art.latent_path)
    codec = latentcodec.LatentCodecModel.load(art.latent_path)

    triples = build_triples(cfg, art, train_records)
    text_emb, wave_emb, _ = clmp.embed_corpus(model, triples)
    x0 = np.stack([
        latentcodec.encode_mel(codec, t.mel).values.ravel() for t in triples
    ])

    def retrieved(queries: np.ndarray) -> np.ndarray:
        out = np.zeros((len(queries), cfg.clmp.embed_dim))
        for i, q in enumerate(queries):
            hit_id, _ = index.search(q, k=1, ef_search=cfg.hnsw.ef_search).hits[0]
            out[i] = index.vector_of(hit_id)
        return out

    r_wave = retrieved(wave_emb)
    r_text = retrieved(text_emb)

    latent_dim = x0.shape[1]
    sched = diffusion.make_schedule(cfg.diffusion.n_steps, cfg.diffusion.beta_start,
                                    cfg.diffusion.beta_end)
    denoiser = diffusion.Denoiser.create(
        latent_dim=latent_dim,
        cond_dim=cfg.diffusion.cond_dim,
        hidden=cfg.diffusion.hidden,
        time_embed_dim=cfg.diffusion.time_embed_dim,
        seed=cfg.seed,
    )
    fusion = diffusion.ConditionFusion.create(cfg.clmp.embed_dim, cfg.diffusion.cond_dim,
                                              seed=cfg.seed)
    opt = smallnet.Optimizer(kind="adamw", learning_rate=cfg.diffusion.learning_rate)
    params = denoiser.parameters() + fusion.parameters()
    names = denoiser.parameter_names() + fusion.parameter_names()
    rng = smallnet.spawn_rng(cfg.seed, 1001)
    phase_boundary = int(cfg.diffusion.phase_split * cfg.diffusion.train_steps)
    history = []
    for step_i in range(cfg.diffusion.train_steps):
        idx = rng.integers(0, len(x0), size=min(cfg.diffusion.batch_size, len(x0)))
        if step_i < phase_boundary:
            queries, melodies = wave_emb[idx], r_wave[idx]
        else:
            queries, melodies = text_emb[idx], r_text[idx]
        conditions = _fuse_rows(fusion, queries, melodies)
        result = diffusion.training_step(
            denoiser, sched, x0[idx], conditions, fusion.null_condition,
            cfg.diffusion.uncond_prob, rng,
        )
        cat = np.concatenate([queries, melodies], axis=1)
        fusion_grads = [cat.T @ result.d_conditions,
                        result.d_conditions.sum(axis=0),
                        result.d_null]
        opt.step(params, result.denoiser_grads + fusion_grads, names)
        history.append(result.loss)

    c, th, fw = _latent_shape(cfg)
    denoiser.save(art.diffusion_path, fusion=fusion, extra_meta={
        "latent_channels": c, "latent_t": th, "latent_f": fw,
        "n_steps": cfg.diffusion.n_steps,
        "beta_start": cfg.diffusion.beta_start,
        "beta_end": cfg.diffusion.beta_end,
        "embed_dim": cfg.clmp.embed_dim,
    })
    return history


# --- generation ----------------------------------------------------------------


def _load_generation_stack(cfg: PipelineConfig, art: Artifacts):
    model = _load_clmp(cfg, art)
    index, ids = _load_index(art)
    art.require(art.latent_path, art.diffusion_path)
    codec = latentcodec.LatentCodecModel.load(art.latent_path)
    denoiser, fusion, extra = diffusion.Denoiser.load(art.diffusion_path)
    if fusion is None:
        raise ValidationError("diffusion checkpoint lacks the condition fusion arrays")
    sched = diffusion.make_schedule(int(extra["n_steps"]), float(extra["beta_start"]),
                                    float(extra["beta_end"]))
    shape = (int(extra["latent_channels"]), int(extra["latent_t"]), int(extra["latent_f"]))
    return model, index, ids, codec, denoiser, fusion, sched, shape


def _sample_latents(denoiser, sched, fusion, conditions: np.ndarray, *,
                    sampler: str, steps: int, w: float, seed: int) -> np.ndarray:
    if sampler == "ddim":
        return diffusion.sample_ddim(denoiser, sched, conditions, fusion.null_condition,
                                     w, steps, seed, n_samples=len(conditions))
    if sampler == "ddpm":
        return diffusion.sample_ddpm(denoiser, sched, conditions, fusion.null_condition,
                                     w, seed, n_samples=len(conditions))
    raise ValidationError(f"unknown sampler {sampler!r}")


def run_generate(cfg: PipelineConfig, workdir, prompt: str, *,
                 seed: int | None = None,
                 steps: int | None = None,
                 w: float | None = None,
                 use_melody: bool = True,
                 sampler: str = "ddim",
                 tag: str = "gen") -> GenerationResult:
    """Text prompt -> retrieve -> fuse -> sample -> decode -> WAV."""
    if not prompt or not prompt.strip():
        raise ValidationError("prompt must be a non-empty string")
    art = Artifacts(workdir)
    model, index, ids, codec, denoiser, fusion, sched, shape = \
        _load_generation_stack(cfg, art)
    seed = cfg.seed if seed is None else seed
    steps = cfg.diffusion.ddim_steps if steps is None else steps
    w = cfg.diffusion.cfg_w if w is None else w

    query = clmp.encode(model, "text", clmp.featurize_text(prompt)).values
    retrieved_id = None
    melody_vec = None
    if use_melody:
        hit_id, _ = index.search(query, k=1, ef_search=cfg.hnsw.ef_search).hits[0]
        melody_vec = index.vector_of(hit_id).astype(np.float64)
        retrieved_id = ids[hit_id]
    cond = diffusion.fuse_condition(fusion, query, melody_vec, "text+melody")

    lat = _sample_latents(denoiser, sched, fusion, cond.vector[None, :],
                          sampler=sampler, steps=steps, w=w, seed=seed)[0]
    z = latentcodec.LatentGrid(lat.reshape(shape), channels=shape[0],
                               compression=codec.compression)
    mel = latentcodec.decode_latent(codec, z)
    wave = signal.mel_to_waveform(mel)

    art.generated_dir.mkdir(parents=True, exist_ok=True)
    base = art.generated_dir / tag
    wav_path = base.with_suffix(".wav")
    mel_path = base.with_suffix(".mel.json")
    latent_path = base.with_suffix(".latent.json")
    signal.write_wav(wav_path, wave)
    smallnet.save_checkpoint(mel_path, {"mel": mel.values},
                             {"frame_hop": mel.frame_hop, "n_fft": mel.n_fft,
                              "sample_rate": mel.sample_rate})
    smallnet.save_checkpoint(latent_path, {"latent": z.values},
                             {"channels": z.channels, "compression": z.compression})
    return GenerationResult(
        prompt=prompt,
        retrieved_melody_id=retrieved_id,
        latent_path=str(latent_path),
        mel_path=str(mel_path),
        wav_path=str(wav_path),
        sampler={"sampler": sampler, "steps": steps, "w": w, "seed": seed},
    )


# --- evaluation ------------------------------------------------------------------

EVAL_MODES = ("standard", "ablation", "steps_sweep", "cfg_sweep")
SWEEP_STEPS = (10, 25, 50, 100, 200)
SWEEP_CFG = (1.5, 2.0, 2.5, 3.0, 3.5, 4.0)


def _eval_conditions(cfg, model, index, fusion, eval_triples, use_melody=True):
    queries = np.stack([
        clmp.encode(model, "text", clmp.featurize_text(t.text)).values
        for t in eval_triples
    ])
    if not use_melody:
        melodies = np.zeros_like(queries)
    else:
        melodies = np.zeros_like(queries)
        for i, q in enumerate(queries):
            hit_id, _ = index.search(q, k=1, ef_search=cfg.hnsw.ef_search).hits[0]
            melodies[i] = index.vector_of(hit_id)
    return _fuse_rows(fusion, queries, melodies)


def _generated_features(cfg, codec, denoiser, sched, fusion, conditions, shape, *,
                        steps, w, seed) -> np.ndarray:
    lats = _sample_latents(denoiser, sched, fusion, conditions,
                           sampler="ddim", steps=steps, w=w, seed=seed)
    feats = []
    for lat in lats:
        z = latentcodec.LatentGrid(lat.reshape(shape), channels=shape[0],
                                   compression=codec.compression)
        mel = latentcodec.decode_latent(codec, z)
        feats.append(clmp.featurize_wave(mel))
    return np.stack(feats)


def _fad(gen_feats: np.ndarray, ref_feats: np.ndarray) -> float:
    return metrics.frechet(metrics.FeatureCloud.from_vectors(gen_feats),
                           metrics.FeatureCloud.from_vectors(ref_feats))


def run_evaluate(cfg: PipelineConfig, workdir, mode: str = "standard",
                 seed: int | None = None, sweep_seeds: int = 5) -> dict:
    """Evaluation modes over the held-out split.

    standard    FAD-like / paired KL / IS-like plus the retrieval table
    ablation    melody-conditioned vs zero-padded-melody FAD-like, per seed
    steps_sweep metrics vs DDIM step count
    cfg_sweep   metrics vs guidance weight
    """
    if mode not in EVAL_MODES:
        raise ValidationError(f"unknown evaluate mode {mode!r} (want one of {EVAL_MODES})")
    art = Artifacts(workdir)
    records = _load_records(cfg, art)
    if cfg.corpus.eval_count < 2:
        raise ValidationError("corpus.eval_count must be >= 2 for evaluation")
    model, index, ids, codec, denoiser, fusion, sched, shape = \
        _load_generation_stack(cfg, art)
    train_records, eval_records = _split(cfg, records)
    eval_triples = build_triples(cfg, art, eval_records)
    seed = cfg.seed if seed is None else seed

    ref_feats = np.stack([clmp.featurize_wave(t.mel) for t in eval_triples])
    conditions = _eval_conditions(cfg, model, index, fusion, eval_triples)

    def gen_feats(*, steps, w, gseed, use_melody=True):
        conds = conditions if use_melody else _eval_conditions(
            cfg, model, index, fusion, eval_triples, use_melody=False)
        return _generated_features(cfg, codec, denoiser, sched, fusion, conds, shape,
                                   steps=steps, w=w, seed=gseed)

    report: dict = {"mode": mode, "n_samples": len(eval_triples),
                    "feature_source": "wave_features_of_decoded_mel"}

    if mode == "standard":
        train_triples = build_triples(cfg, art, train_records)
        probe = metrics.train_probe(
            np.stack([clmp.featurize_wave(t.mel) for t in train_triples]),
            [r.archetype.label for r in train_records],
            metrics.ProbeTrainConfig(seed=cfg.seed),
        )
        feats = gen_feats(steps=cfg.diffusion.ddim_steps, w=cfg.diffusion.cfg_w, gseed=seed)
        gen_by_id = {t.id: f for t, f in zip(eval_triples, feats)}
        ref_by_id = {t.id: f for t, f in zip(eval_triples, ref_feats)}
        report.update({
            "fad_like": _fad(feats, ref_feats),
            "kl": metrics.paired_kl(probe, gen_by_id, ref_by_id),
            "is_like": metrics.inception_like(probe, feats),
            "probe_holdout_accuracy": probe.holdout_accuracy,
            "retrieval": clmp.eval_retrieval(model, eval_triples),
        })
        return report

    if mode == "ablation":
        runs = []
        for s in range(sweep_seeds):
            gseed = seed + 1000 * (s + 1)
            fad_mel = _fad(gen_feats(steps=cfg.diffusion.ddim_steps,
                                     w=cfg.diffusion.cfg_w, gseed=gseed), ref_feats)
            fad_zero = _fad(gen_feats(steps=cfg.diffusion.ddim_steps,
                                      w=cfg.diffusion.cfg_w, gseed=gseed,
                                      use_melody=False), ref_feats)
            runs.append({"seed": gseed, "fad_with_melody": fad_mel,
                         "fad_zero_melody": fad_zero})
        report["runs"] = runs
        report["median_fad_with_melody"] = float(np.median([r["fad_with_melody"] for r in runs]))
        report["median_fad_zero_melody"] = float(np.median([r["fad_zero_melody"] for r in runs]))
        return report

    sweep = SWEEP_STEPS if mode == "steps_sweep" else SWEEP_CFG
    points = []
    for value in sweep:
        steps = value if mode == "steps_sweep" else cfg.diffusion.ddim_steps
        w = cfg.diffusion.cfg_w if mode == "steps_sweep" else value
        if steps > sched.N:
            continue
        fads = []
        for s in range(sweep_seeds):
            gseed = seed + 1000 * (s + 1)
            fads.append(_fad(gen_feats(steps=steps, w=w, gseed=gseed), ref_feats))
        key = "steps" if mode == "steps_sweep" else "w"
        points.append({key: value, "fad_like_median": float(np.median(fads)),
                       "fad_like_runs": fads})
    report["points"] = points
    return report
