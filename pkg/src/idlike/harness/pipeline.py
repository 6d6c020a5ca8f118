"""Experiment orchestration: mine -> train -> score -> eval.

Each stage reads its inputs from ``output_dir`` and writes its outputs
there, so stages can be run one at a time from the command line and a
full run goes through exactly the same files:

====================  ==========================================
``mined.jsonl``       one crop per line, ID crops first
``mined.emb``         crop embeddings (cache format)
``prompts.ckpt``      trained prompts
``history.jsonl``     per-step losses
``scores.jsonl``      trained-prompt scores, every test sample
``scores_zeroshot.jsonl``  zero-shot scores, every test sample
``report.jsonl``      one metrics row per (method, OOD set)
``report.txt``        the same as a table
``FAILED``            present only if the last run raised
====================  ==========================================
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from ..detect import calibrate_gamma, score_record
from ..embedcore import SimilarityRow
from ..encoder import AdapterBackend, EncoderBackend, HttpTransport, toy_backend, zero_shot_embeddings
from ..metrics import EvalResult, average_results, evaluate
from ..miner import MinedDatasets, MinedEntry, build_mined_datasets
from ..promptlearn import init_prompts, load_checkpoint, prompt_features, save_checkpoint, train
from . import cache
from .config import RunConfig
from .data import class_table, ingest_dataset, sample_fewshot

log = logging.getLogger(__name__)

ID_SET = "id"
AVERAGE = "Average"
TRAINED_METHODS = ("idlike", "mcm", "msp")
ZEROSHOT_METHOD = "mcm_zeroshot"


def make_backend(cfg: RunConfig) -> EncoderBackend:
    enc = cfg.encoder
    if enc["kind"] == "adapter":
        return AdapterBackend(HttpTransport(enc["url"]))
    return toy_backend(enc["seed"], enc["dim"], input_size=enc["input_size"])


def _out(cfg: RunConfig) -> Path:
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    return cfg.output_dir


def _write_jsonl(path: Path, records) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def _unit_rows(m) -> np.ndarray:
    # float32 storage breaks unit norm in the last bits; cosines must stay <= 1
    m = np.asarray(m, dtype=np.float64)
    return m / np.linalg.norm(m, axis=1, keepdims=True)


# -- mine ---------------------------------------------------------------------

def run_mine(cfg: RunConfig, backend: EncoderBackend) -> MinedDatasets:
    names = class_table(cfg.id_train)
    full, _ = ingest_dataset(cfg.id_train, names)
    fewshot = sample_fewshot(full, cfg.shots, cfg.seed, names)
    log.info("mining %d few-shot samples (%d classes)", len(fewshot), len(names))
    mined = build_mined_datasets([(s.image, s.label) for s in fewshot], backend, cfg.miner, names,
                                 workers=cfg.workers)
    out = _out(cfg)
    entries = mined.entries()
    cache.write_cache(out / "mined.emb", [f"{e.source_index}:{e.crop_index}" for e in entries],
                      np.stack([e.embedding for e in entries]), [e.label for e in entries])
    records = []
    for row, e in enumerate(entries):
        rec = {"source_index": e.source_index, "source_id": fewshot[e.source_index].sample_id,
               "crop_index": e.crop_index, "crop_box": list(e.crop_box), "sim": e.sim,
               "embedding_offset": row}
        if e.label is not None:
            rec["label"] = e.label
        records.append(rec)
    _write_jsonl(out / "mined.jsonl", records)
    return load_mined(out)


def load_mined(out_dir) -> MinedDatasets:
    out_dir = Path(out_dir)
    _, embs, _ = cache.read_cache(out_dir / "mined.emb")
    embs = _unit_rows(embs)
    mined = MinedDatasets()
    for rec in read_jsonl(out_dir / "mined.jsonl"):
        e = MinedEntry(rec["source_index"], rec["crop_index"], tuple(rec["crop_box"]), rec["sim"],
                       embs[rec["embedding_offset"]], rec.get("label"))
        (mined.d_in if e.label is not None else mined.d_out).append(e)
    return mined


# -- train --------------------------------------------------------------------

def run_train(cfg: RunConfig, backend: EncoderBackend):
    out = _out(cfg)
    mined = load_mined(out)
    names = class_table(cfg.id_train)
    ps = init_prompts(names, cfg.C, cfg.L, cfg.seed, backend, std=cfg.init_std)
    trained, history = train(mined, ps, backend, cfg.train, cfg.loss)
    save_checkpoint(out / "prompts.ckpt", trained, step=len(history), config=cfg.as_dict())
    _write_jsonl(out / "history.jsonl", history)
    return trained, history


# -- score --------------------------------------------------------------------

def _embed_set(cfg, backend, name, manifest, names):
    samples, _ = ingest_dataset(manifest, names)
    ids = [s.sample_id for s in samples]
    labels = [s.label for s in samples]
    path = None
    if cfg.use_cache:
        key = hashlib.sha256(json.dumps({"backend": backend.fingerprint(), "ids": ids,
                                         "labels": labels}, sort_keys=True).encode()).hexdigest()[:16]
        path = cache.cache_dir(cfg.output_dir / "cache") / f"{name}-{key}.emb"
        if path.is_file():
            cached_ids, embs, _ = cache.read_cache(path)
            if cached_ids == ids:
                return samples, _unit_rows(embs)
    embs = backend.encode_images([s.image for s in samples])
    if path is not None:
        cache.write_cache(path, ids, embs, labels)
    # round through float32 either way so cached and fresh runs agree bitwise
    return samples, _unit_rows(np.asarray(embs, dtype=np.float32))


def test_sets(cfg: RunConfig) -> list[tuple[str, Path]]:
    return [(ID_SET, cfg.id_test), *sorted(cfg.ood_tests.items())]


def run_score(cfg: RunConfig, backend: EncoderBackend):
    """Score every test sample with the checkpointed (float32) prompts and
    with zero-shot class prompts.  Returns ``(trained_records, zeroshot_records)``."""
    out = _out(cfg)
    ps, _ = load_checkpoint(out / "prompts.ckpt")
    names = class_table(cfg.id_train)
    if list(ps.class_names) != names:
        raise ValueError("checkpoint classes do not match the training manifest")
    f_in, f_out = prompt_features(ps, backend)
    zs = zero_shot_embeddings(backend, names)
    trained, zeroshot = [], []
    for set_name, manifest in test_sets(cfg):
        samples, embs = _embed_set(cfg, backend, set_name, manifest, names if set_name == ID_SET else None)
        for s, z in zip(samples, embs):
            label = s.label if set_name == ID_SET else None
            trained.append(score_record(s.sample_id, SimilarityRow(f_in @ z, f_out @ z), cfg.tau, label)
                           .to_json(set=set_name))
            zeroshot.append(score_record(s.sample_id, SimilarityRow(zs @ z), cfg.tau, label)
                            .to_json(set=set_name))
    _write_jsonl(out / "scores.jsonl", trained)
    _write_jsonl(out / "scores_zeroshot.jsonl", zeroshot)
    return trained, zeroshot


# -- eval ---------------------------------------------------------------------

def ranking_scores(records, method: str) -> np.ndarray:
    """The log-odds twin when the dump has it, else the raw score."""
    key = f"logit_{method}" if f"logit_{method}" in records[0] else f"score_{method}"
    return np.array([r[key] for r in records], dtype=np.float64)


def split_dump(records) -> tuple[list[dict], dict[str, list[dict]]]:
    id_recs = [r for r in records if r.get("set", ID_SET) == ID_SET]
    ood = {}
    for r in records:
        if r.get("set", ID_SET) != ID_SET:
            ood.setdefault(r["set"], []).append(r)
    return id_recs, dict(sorted(ood.items()))


def evaluate_dump(records, methods=TRAINED_METHODS, target_tpr: float = 0.95) -> dict:
    """``{method: {ood_set: EvalResult, ..., "Average": EvalResult}}``."""
    id_recs, ood = split_dump(records)
    if not id_recs or not ood:
        raise ValueError("a score dump needs both ID and OOD records")
    preds = [r["predicted_class"] for r in id_recs]
    labels = [r["label"] for r in id_recs]
    table = {}
    for m in methods:
        id_scores = ranking_scores(id_recs, m)
        rows = {name: evaluate(id_scores, ranking_scores(recs, m), preds, labels, target_tpr)
                for name, recs in ood.items()}
        rows[AVERAGE] = average_results(rows.values())
        table[m] = rows
    return table


def report_rows(table: dict) -> list[dict]:
    return [{"method": m, "ood_set": s, **r.to_json()} for m, rows in table.items() for s, r in rows.items()]


def format_table(rows) -> str:
    head = f"{'method':<14} {'ood_set':<16} {'FPR95':>8} {'AUROC':>8} {'ID ACC':>8} {'n_id':>6} {'n_ood':>6}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['method']:<14} {r['ood_set']:<16} {100 * r['fpr_at_95']:8.2f} "
                     f"{100 * r['auroc']:8.2f} {100 * r['id_acc']:8.2f} {r['n_id']:6d} {r['n_ood']:6d}")
    return "\n".join(lines) + "\n"


def run_eval(cfg: RunConfig) -> dict:
    out = _out(cfg)
    table = evaluate_dump(read_jsonl(out / "scores.jsonl"), TRAINED_METHODS, cfg.target_tpr)
    zs = evaluate_dump(read_jsonl(out / "scores_zeroshot.jsonl"), ("mcm",), cfg.target_tpr)
    table[ZEROSHOT_METHOD] = zs["mcm"]
    rows = report_rows(table)
    _write_jsonl(out / "report.jsonl", rows)
    (out / "report.txt").write_text(format_table(rows))
    return table


def calibrate_dump(records, method: str = "idlike", target_tpr: float = 0.95) -> dict:
    """Threshold on the ID records of a dump, in score and log-odds form."""
    id_recs, _ = split_dump(records)
    out = {"method": method, "target_tpr": target_tpr,
           "gamma": calibrate_gamma([r[f"score_{method}"] for r in id_recs], target_tpr)}
    if f"logit_{method}" in id_recs[0]:
        out["gamma_logit"] = calibrate_gamma([r[f"logit_{method}"] for r in id_recs], target_tpr)
    return out


# -- full run -----------------------------------------------------------------

STAGES = ("mine", "train", "score", "eval")


def run_stage(stage: str, cfg: RunConfig, backend: EncoderBackend | None = None):
    if stage == "eval":
        return run_eval(cfg)
    backend = backend or make_backend(cfg)
    return {"mine": run_mine, "train": run_train, "score": run_score}[stage](cfg, backend)


def run_experiment(cfg: RunConfig) -> dict:
    """Every stage in order.  Returns the eval table (see ``evaluate_dump``).

    On failure a ``FAILED`` file naming the stage and error is left next
    to whatever artifacts were already written, and the error propagates.
    """
    cfg.validate()
    out = _out(cfg)
    marker = out / "FAILED"
    marker.unlink(missing_ok=True)
    stage = STAGES[0]
    try:
        backend = make_backend(cfg)
        for stage in STAGES[:-1]:
            run_stage(stage, cfg, backend)
        stage = "eval"
        return run_eval(cfg)
    except Exception as exc:
        marker.write_text(f"stage: {stage}\nerror: {type(exc).__name__}: {exc}\n")
        raise


def summary(table: dict, method: str = "idlike") -> EvalResult:
    return table[method][AVERAGE]
