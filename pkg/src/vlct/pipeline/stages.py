"""Pipeline stages and their on-disk artifacts.

Each run lives in ``<out_dir>/<config hash>/`` and holds ``config.json``,
``config_hash.txt`` and ``versions.json``. Every stage writes into its own
subdirectory and finishes by writing a ``DONE`` marker that records the
config hash; a stage whose marker matches is skipped on rerun.

Stage graph::

    ingest -> label
    ingest -> encode -> train -> eval-retrieval
                              -> eval-classify (needs label)
                              -> rag -> gen-eval (needs label)
"""

from __future__ import annotations

import json
import logging
import platform
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy

from .. import __version__
from ..contrastive.checkpoint import load_checkpoint, save_checkpoint
from ..contrastive.model import Frozen, encode_texts, encode_volumes, init_params
from ..contrastive.train import StudyItem, train
from ..errors import ConfigError, ConfigHashMismatch, MissingPrerequisite, NoEligibleSeries
from ..evaluation import (
    EvalReport,
    classify_metrics,
    equivalence_classes,
    label_consistency,
    probe_fit,
    random_mrr,
    retrieval_both,
)
from ..evaluation.metrics import bleu_sentence, rouge_l_f1
from ..labeler import ActivityLabel, HttpTeacher, ReplayTeacher, ReportDoc, classify_text, label_reports
from ..labeler.rules import normalize_impression
from ..rag import (
    EmbeddingIndex,
    GenerationRequest,
    HttpGenerationClient,
    NearestExampleClient,
    assemble_prompt,
    generate_with_filter,
    retrieve,
)
from ..rag.generate import DecodingParams
from ..representation.providers import (
    FileSliceEmbeddings,
    FileTextEmbeddings,
    ToyTextEncoder,
    ToyVisionEncoder,
)
from ..slices import build_montage, encode_volume
from ..volume import SeriesCandidate, read_container, read_manifest, resample_isotropic, select_series, series_candidates
from .config import RunConfig
from .synth import largest_remainder

log = logging.getLogger(__name__)

STAGES = ("ingest", "label", "encode", "train", "eval-retrieval", "eval-classify", "rag", "gen-eval")
REQUIRES = {
    "ingest": (),
    "label": ("ingest",),
    "encode": ("ingest",),
    "train": ("encode",),
    "eval-retrieval": ("train",),
    "eval-classify": ("train", "label"),
    "rag": ("train",),
    "gen-eval": ("rag", "label"),
}
SPLITS = ("train", "val", "test")


def _read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _write_jsonl(path, rows) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


@dataclass
class StageOutcome:
    stage: str
    cached: bool
    summary: dict


class Run:
    """A run directory bound to one configuration."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.dir = cfg.run_dir

    def init(self) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        cfg_path = self.dir / "config.json"
        if cfg_path.exists():
            stored = RunConfig.from_dict(json.loads(cfg_path.read_text()))
            if stored.hash != self.cfg.hash:
                raise ConfigHashMismatch(
                    f"{cfg_path} hashes to {stored.hash}, expected {self.cfg.hash}")
        else:
            _write_json(cfg_path, self.cfg.to_dict())
        (self.dir / "config_hash.txt").write_text(self.cfg.hash + "\n")
        _write_json(self.dir / "versions.json", {
            "vlct": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()})

    def path(self, stage: str, name: str = "") -> Path:
        return self.dir / stage / name if name else self.dir / stage

    def done(self, stage: str) -> bool:
        marker = self.path(stage, "DONE")
        if not marker.exists():
            return False
        recorded = marker.read_text().strip()
        if recorded != self.cfg.hash:
            raise ConfigHashMismatch(f"stage {stage} was produced by config {recorded}")
        return True

    def begin(self, stage: str) -> Path:
        d = self.path(stage)
        if d.exists():
            shutil.rmtree(d)  # partial output from an interrupted attempt
        d.mkdir(parents=True)
        return d

    def finish(self, stage: str) -> None:
        self.path(stage, "DONE").write_text(self.cfg.hash + "\n")

    def require(self, stage: str) -> None:
        for pre in REQUIRES[stage]:
            if not self.done(pre):
                raise MissingPrerequisite(f"stage '{stage}' needs '{pre}' to have run first")


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------

def patient_split(patients: dict[str, int], fractions: dict, seed: int) -> dict[str, str]:
    """Assign each patient to a split, stratified by the given per-patient stratum."""
    fr = [fractions[s] for s in SPLITS]
    out = {}
    rng = np.random.default_rng([seed, 0x5B17])
    for stratum in sorted(set(patients.values())):
        members = sorted(p for p, s in patients.items() if s == stratum)
        members = [members[i] for i in rng.permutation(len(members))]
        counts = largest_remainder(len(members), fr)
        start = 0
        for name, n in zip(SPLITS, counts):
            for p in members[start:start + n]:
                out[p] = name
            start += n
    return out


def stage_ingest(run: Run) -> dict:
    data = run.cfg["data"]
    if not data["manifest"] or not data["reports"]:
        raise ConfigError("data.manifest and data.reports are required")
    records = read_manifest(data["manifest"])
    groups = series_candidates(records)
    by_series = {(r["study_id"], r.get("series_id")): r for r in records}
    reports = {r["study_id"]: r for r in _read_jsonl(data["reports"])}
    rows, excluded = [], []
    for sid in sorted(groups):
        if sid not in reports:
            excluded.append({"study_id": sid, "reason": "no report"})
            continue
        try:
            chosen = select_series(groups[sid])
        except NoEligibleSeries as exc:
            excluded.append({"study_id": sid, "reason": str(exc)})
            continue
        rec = by_series.get((sid, chosen.series_id)) or next(
            r for (s, _), r in by_series.items() if s == sid)
        rep = reports[sid]
        rows.append({"study_id": sid, "patient_id": rep.get("patient_id") or sid,
                     "series_id": chosen.series_id, "n_slices": chosen.slice_count,
                     "header_path": rec["header_path"], "payload_path": rec["payload_path"],
                     "findings": rep.get("findings", ""), "impression": rep["impression"]})
    # stratify patients by the rule label of their first study
    strata = {}
    for row in rows:
        strata.setdefault(row["patient_id"], int(classify_text(row["impression"])))
    split = patient_split(strata, run.cfg["split"], run.cfg.seed)
    for row in rows:
        row["split"] = split[row["patient_id"]]
    d = run.begin("ingest")
    _write_jsonl(d / "studies.jsonl", rows)
    _write_jsonl(d / "excluded.jsonl", excluded)
    counts = {s: sum(r["split"] == s for r in rows) for s in SPLITS}
    return {"studies": len(rows), "excluded": len(excluded), "split": counts}


def load_studies(run: Run) -> list[dict]:
    return _read_jsonl(run.path("ingest", "studies.jsonl"))


# ---------------------------------------------------------------------------
# label
# ---------------------------------------------------------------------------

def _teachers(cfg: RunConfig):
    if cfg["labels"]["teachers"] == "http":
        return [HttpTeacher.from_env("teacher_a", "VLCT_TEACHER_A"),
                HttpTeacher.from_env("teacher_b", "VLCT_TEACHER_B")]
    paths = cfg["data"]["teacher_replies"]
    if not paths or len(paths) != 2:
        raise ConfigError("replay teachers need data.teacher_replies with two files")
    return [ReplayTeacher(name, {r["study_id"]: r["reply"] for r in _read_jsonl(p)})
            for name, p in sorted(paths.items())]


def stage_label(run: Run) -> dict:
    studies = load_studies(run)
    docs = [ReportDoc(s["study_id"], s["findings"], s["impression"]) for s in studies]
    results = label_reports(docs, _teachers(run.cfg), max_workers=run.cfg["labels"]["workers"])
    d = run.begin("label")
    _write_jsonl(d / "labels.jsonl", [r.to_record(doc.study_id) for r, doc in zip(results, docs)])
    conf = [r.confidence.value for r in results]
    return {c: conf.count(c) for c in ("high", "medium", "abstain")}


def consensus_labels(run: Run) -> dict[str, ActivityLabel]:
    """Non-abstained consensus labels keyed by study id."""
    return {r["study_id"]: ActivityLabel.parse(r["label"])
            for r in _read_jsonl(run.path("label", "labels.jsonl")) if r["label"] is not None}


def reference_labels(run: Run) -> dict[str, ActivityLabel]:
    """Evaluation truth: the ground-truth file when configured, else consensus."""
    gt = run.cfg["data"]["ground_truth"]
    if gt:
        return {r["study_id"]: ActivityLabel.parse(r["label"]) for r in _read_jsonl(gt)}
    return consensus_labels(run)


# ---------------------------------------------------------------------------
# encode
# ---------------------------------------------------------------------------

def _providers(cfg: RunConfig):
    p = cfg["providers"]
    if p["kind"] == "toy":
        return ToyVisionEncoder(p["d"], cfg.seed), ToyTextEncoder(p["d"], cfg.seed)
    if not p["slice_embeddings"] or not p["text_embeddings"]:
        raise ConfigError("file providers need providers.slice_embeddings and text_embeddings")
    return FileSliceEmbeddings.load(p["slice_embeddings"]), FileTextEmbeddings.load(p["text_embeddings"])


def load_volume(study: dict):
    cand = SeriesCandidate(study["series_id"], study["n_slices"],
                           volume=lambda: read_container(study["header_path"], study["payload_path"]))
    return resample_isotropic(cand.load())


def stage_encode(run: Run) -> dict:
    studies = load_studies(run)
    vision, text = _providers(run.cfg)
    enc = run.cfg.encoding
    seed = run.cfg.seed

    def work(study):
        slices = encode_volume(load_volume(study), enc, seed)
        return vision.features(slices)

    with ThreadPoolExecutor(max_workers=run.cfg["labels"]["workers"]) as pool:
        slice_feats = list(pool.map(work, studies))
    text_feats = text.features([s["impression"] for s in studies])
    d = run.begin("encode")
    np.savez(d / "features.npz",
             study_ids=np.array([s["study_id"] for s in studies]),
             offsets=np.cumsum([0] + [f.shape[0] for f in slice_feats]),
             slice_feats=np.concatenate(slice_feats), text_feats=text_feats,
             vision_W=vision.base_weight, text_W=text.base_weight)
    return {"studies": len(studies), "slices_per_study": int(np.median([f.shape[0] for f in slice_feats]))}


def load_features(run: Run):
    with np.load(run.path("encode", "features.npz")) as z:
        ids = z["study_ids"].tolist()
        off = z["offsets"]
        sf = z["slice_feats"]
        feats = {sid: (sf[off[i]:off[i + 1]], z["text_feats"][i]) for i, sid in enumerate(ids)}
        frozen = Frozen(z["vision_W"], z["text_W"])
    return feats, frozen


def study_items(run: Run) -> dict[str, list[StudyItem]]:
    feats, _ = load_features(run)
    items = {s: [] for s in SPLITS}
    for st in load_studies(run):
        sf, tf = feats[st["study_id"]]
        items[st["split"]].append(StudyItem(st["study_id"], sf, tf, st["impression"]))
    return items


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _embed(params, frozen, spec, items):
    V, _ = encode_volumes(params, frozen, spec, [it.slice_feats for it in items])
    T, _ = encode_texts(params, frozen, spec, np.stack([it.text_feats for it in items]))
    return V, T


def stage_train(run: Run) -> dict:
    items = study_items(run)
    _, frozen = load_features(run)
    spec = run.cfg.model_spec
    d = run.begin("train")
    res = train(items["train"], items["val"], spec, frozen, run.cfg.train_config,
                metrics_path=d / "metrics.jsonl")
    save_checkpoint(d / "checkpoint.npz", res.params, spec,
                    {"seed": run.cfg.seed, "config_hash": run.cfg.hash, "best_epoch": res.best_epoch})
    init = init_params(spec, frozen, run.cfg.seed)
    arrays = {}
    for split, its in items.items():
        if not its:
            continue
        arrays[f"{split}_ids"] = np.array([it.study_id for it in its])
        arrays[f"{split}_V"], arrays[f"{split}_T"] = _embed(res.params, frozen, spec, its)
        arrays[f"{split}_V0"], arrays[f"{split}_T0"] = _embed(init, frozen, spec, its)
    np.savez(d / "embeddings.npz", **arrays)
    hist = res.history
    return {"best_epoch": res.best_epoch, "stopped_early": res.stopped_early,
            "val_loss_epoch0": hist[0]["val_loss"],
            "val_loss_best": min(h["val_loss"] for h in hist[1:]) if len(hist) > 1 else hist[0]["val_loss"]}


def load_embeddings(run: Run) -> dict:
    with np.load(run.path("train", "embeddings.npz")) as z:
        return {k: (z[k].tolist() if k.endswith("_ids") else z[k]) for k in z.files}


def load_model(run: Run):
    _, frozen = load_features(run)
    return load_checkpoint(run.path("train", "checkpoint.npz"), frozen)


# ---------------------------------------------------------------------------
# evaluation stages
# ---------------------------------------------------------------------------

def _impressions(run: Run) -> dict[str, str]:
    return {s["study_id"]: s["impression"] for s in load_studies(run)}


def stage_eval_retrieval(run: Run) -> dict:
    emb = load_embeddings(run)
    imp = _impressions(run)
    ids = emb["test_ids"]
    classes = equivalence_classes([normalize_impression(imp[i]) for i in ids])
    ks = tuple(run.cfg["eval"]["ks"])
    out = {"trained": retrieval_both(emb["test_V"] @ emb["test_T"].T, classes, ks),
           "untrained": retrieval_both(emb["test_V0"] @ emb["test_T0"].T, classes, ks),
           "random_mrr": random_mrr(classes), "n_queries": len(ids),
           "n_classes": int(classes.max()) + 1}
    d = run.begin("eval-retrieval")
    _write_json(d / "metrics.json", out)
    return {"t2i_mrr": out["trained"]["text_to_image"]["MRR"], "random_mrr": out["random_mrr"]}


def stage_eval_classify(run: Run) -> dict:
    emb = load_embeddings(run)
    train_lab = consensus_labels(run)
    truth = reference_labels(run)
    tr = [(i, v) for i, v in zip(emb["train_ids"], emb["train_V"]) if i in train_lab]
    te = [(i, v) for i, v in zip(emb["test_ids"], emb["test_V"]) if i in truth]
    model = probe_fit(np.stack([v for _, v in tr]), np.array([int(train_lab[i]) for i, _ in tr]),
                      C=run.cfg["eval"]["probe_c"])
    y_true = np.array([int(truth[i]) for i, _ in te])
    y_pred = model.predict(np.stack([v for _, v in te]))
    m = classify_metrics(y_pred.tolist(), y_true.tolist())
    prev = np.bincount(y_true, minlength=3) / len(y_true)
    out = {"probe": m, "n_train": len(tr), "n_test": len(te), "probe_iterations": len(model.trace) - 1,
           "chance_uniform_accuracy": 1.0 / 3.0, "chance_prevalence_accuracy": float(np.sum(prev ** 2)),
           "majority_accuracy": float(prev.max())}
    d = run.begin("eval-classify")
    _write_json(d / "metrics.json", out)
    return {"accuracy": m["accuracy"], "macro_f1": m["macro_f1"]}


def _generation_client(cfg: RunConfig):
    if cfg["rag"]["generator"] == "http":
        return HttpGenerationClient.from_env(multimodal=cfg["rag"]["multimodal"])
    return NearestExampleClient()


def stage_rag(run: Run) -> dict:
    emb = load_embeddings(run)
    imp = _impressions(run)
    index = EmbeddingIndex.build(emb["train_V"], emb["train_ids"], [imp[i] for i in emb["train_ids"]])
    client = _generation_client(run.cfg)
    rc = run.cfg["rag"]
    studies = {s["study_id"]: s for s in load_studies(run)}
    rows = []
    for sid, q in zip(emb["test_ids"], emb["test_V"]):
        hits = retrieve(index, q, run.cfg.mmr, emb["train_T"])
        image = None
        if rc["multimodal"]:
            image = build_montage(load_volume(studies[sid]), seed=run.cfg.seed).png_bytes()
        req = GenerationRequest(assemble_prompt([h.impression for h in hits]), DecodingParams(),
                                rc["best_of"], rc["max_retries"], image)
        res = generate_with_filter(req, client)
        rows.append({"study_id": sid, "retrieved": [h.study_id for h in hits],
                     "similarities": [round(h.similarity, 12) for h in hits],
                     "text": res.text, "degraded": res.degraded, "rounds": res.rounds})
    d = run.begin("rag")
    _write_jsonl(d / "generations.jsonl", rows)
    return {"generated": len(rows), "degraded": sum(r["degraded"] for r in rows)}


def stage_gen_eval(run: Run) -> dict:
    gens = _read_jsonl(run.path("rag", "generations.jsonl"))
    imp = _impressions(run)
    truth = reference_labels(run)
    rouge = [rouge_l_f1(g["text"], imp[g["study_id"]]) for g in gens]
    bleu = [bleu_sentence(g["text"], imp[g["study_id"]]) for g in gens]
    scored = [g for g in gens if g["study_id"] in truth]
    true = [truth[g["study_id"]] for g in scored]
    cons = label_consistency([g["text"] for g in scored], true)
    out = {"rouge_l": float(np.mean(rouge)), "bleu": float(np.mean(bleu)),
           "consistency": cons, "n": len(gens), "n_labelled": len(scored)}
    d = run.begin("gen-eval")
    _write_json(d / "metrics.json", out)
    return {"rouge_l": out["rouge_l"], "bleu": out["bleu"], "within1": cons["ordinal"]["within1"]}


STAGE_FUNCS = {
    "ingest": stage_ingest, "label": stage_label, "encode": stage_encode, "train": stage_train,
    "eval-retrieval": stage_eval_retrieval, "eval-classify": stage_eval_classify,
    "rag": stage_rag, "gen-eval": stage_gen_eval,
}


# ---------------------------------------------------------------------------
# consolidated report
# ---------------------------------------------------------------------------

def build_report(run: Run) -> EvalReport:
    rep = EvalReport()
    p = run.path("eval-retrieval", "metrics.json")
    if p.exists():
        m = json.loads(p.read_text())
        cols = [f"R@{k}" for k in run.cfg["eval"]["ks"]] + ["MRR"]
        for model in ("trained", "untrained"):
            for direction, vals in m[model].items():
                rep.add("retrieval", f"{model} {direction}", **{c: vals[c] for c in cols})
        rep.add("retrieval", "random ranker", MRR=m["random_mrr"])
    p = run.path("eval-classify", "metrics.json")
    if p.exists():
        m = json.loads(p.read_text())
        pm = m["probe"]
        rep.add("classification", "probe", accuracy=pm["accuracy"], macro_f1=pm["macro_f1"],
                **{f"f1_{k}": v for k, v in pm["f1"].items()},
                confusion_matrix=pm["confusion_matrix"])
        rep.add("classification", "chance (uniform)", accuracy=m["chance_uniform_accuracy"])
        rep.add("classification", "chance (prevalence)", accuracy=m["chance_prevalence_accuracy"])
    p = run.path("gen-eval", "metrics.json")
    if p.exists():
        m = json.loads(p.read_text())
        o = m["consistency"]["ordinal"]
        rep.add("generation", "rag", rouge_l=m["rouge_l"], bleu=m["bleu"], exact=o["exact"],
                mae=o["mae"], within1=o["within1"])
        rep.add("generation", "chance (prevalence)", within1=o["chance_within1_prevalence"])
        rep.add("generation", "chance (uniform)", within1=o["chance_within1_uniform"])
    return rep


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def run_stage(run: Run, stage: str, force: bool = False) -> StageOutcome:
    if stage not in STAGE_FUNCS:
        raise ConfigError(f"unknown stage {stage!r}; choose from {STAGES}")
    if not force and run.done(stage):
        log.info("stage %s already complete for config %s; using cached artifacts", stage, run.cfg.hash)
        return StageOutcome(stage, True, {})
    run.require(stage)
    summary = STAGE_FUNCS[stage](run)
    run.finish(stage)
    log.info("stage %s done: %s", stage, summary)
    return StageOutcome(stage, False, summary)


def run_pipeline(cfg: RunConfig, stage: str, force: bool = False) -> list[StageOutcome]:
    """Run one stage (or ``all``) and refresh the run's report files."""
    run = Run(cfg)
    run.init()
    todo = STAGES if stage == "all" else (stage,)
    outcomes = [run_stage(run, s, force) for s in todo]
    rep = build_report(run)
    if rep.tables:
        rep.write(run.dir)
    return outcomes
