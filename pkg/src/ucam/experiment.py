"""Run configuration and the train / evaluate / analyze / explain / ablate drivers.

Output layout of one run directory::

    checkpoint.bin  checkpoint.json  config.json  losses.csv  metrics.json
    explain/        analyze/
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import data as D
from . import gca as G
from . import losses as L
from . import metrics as M
from .model import ForwardPass, ModelConfig, init_params, load_checkpoint, predict, save_checkpoint
from .numerics import RngStream

log = logging.getLogger(__name__)

INIT_STREAM, SHUFFLE_STREAM, TARGET_STREAM, ANALYSIS_STREAM = 1, 4, 5, 6
LOSS_COLUMNS = ("step", "mode", "L_y", "L_p", "L_VE", "L_UDL", "L_u", "C_total")


@dataclass
class RunConfig:
    """Every knob of a run.  Batch size is 64 to suit a single-core budget."""

    mode: str = "baseline"
    seed: int = 0
    data: str = "data"
    out: str = "runs/default"
    # model
    grid: int = 7
    image_dim: int = 32
    question_dim: int = 32
    key_dim: int = 32
    feature_dim: int = 32
    hidden: int = 64
    dropout: float = 0.3
    # gradient certainty
    lam: float = 1.0
    gamma: float = -10.0
    normalization: str = "softmax"
    eps_norm: float = 1e-12
    # Monte Carlo
    mc_T: int = 10
    analysis_T: int = 25
    perturb_scale: str = "stddev"
    # losses
    eta_loss: float = 0.5
    # tuned on the validation split: sigma0**2 above ln(16) keeps the equalizer
    # quiet at the near-uniform start of training in predictive modes
    sigma0: float = 1.75
    udl_alpha: float = 1.0
    udl_variant: str = "equation"
    entropy_grad: bool = False
    # optimization
    lr: float = 1e-3
    lr_uncertainty: float = 0.004
    beta1: float = 0.95
    beta2: float = 0.99
    adam_eps: float = 1e-8
    batch: int = 64
    epochs: int = 30
    # "gt": rule-oracle answer; "sampled": one random annotator per record per epoch
    target: str = "gt"

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def to_dict(self):
        return dataclasses.asdict(self)

    def model_config(self):
        return ModelConfig(grid=self.grid, image_dim=self.image_dim, question_dim=self.question_dim,
                           key_dim=self.key_dim, feature_dim=self.feature_dim, hidden=self.hidden,
                           dropout=self.dropout)

    def gca_config(self):
        return G.GCAConfig(self.lam, self.gamma, self.normalization, self.eps_norm)

    def loss_hyper(self):
        return L.LossHyper(self.eta_loss, self.sigma0, self.udl_alpha, self.udl_variant,
                           self.entropy_grad)

    def validate(self):
        L.get_mode(self.mode)
        if self.target not in ("gt", "sampled"):
            raise ValueError("target must be 'gt' or 'sampled'")
        if self.batch < 1 or self.epochs < 0:
            raise ValueError("batch must be >= 1 and epochs >= 0")
        self.gca_config()
        L.MCConfig(self.mc_T, RngStream(0), self.perturb_scale)
        return self


def load_split(data_dir, split):
    records = list(D.load_dataset(data_dir, split))
    return records, D.encode_records(records)


def _epoch_targets(enc, cfg, root, epoch):
    if cfg.target == "gt":
        return enc
    pick = root.derive(TARGET_STREAM, epoch).generator().integers(
        enc.annotations.shape[1], size=len(enc))
    return enc.with_targets(enc.annotations[np.arange(len(enc)), pick])


def train(cfg: RunConfig, train_enc, on_step=None):
    """Train from scratch; returns final parameters."""
    cfg.validate()
    root = RngStream(cfg.seed)
    mode = L.get_mode(cfg.mode)
    params = init_params(cfg.model_config(), root.derive(INIT_STREAM))
    opts = G.make_optimizers(cfg.lr, cfg.lr_uncertainty, cfg.beta1, cfg.beta2, cfg.adam_eps)
    gcfg, hp = cfg.gca_config(), cfg.loss_hyper()
    step = 0
    for epoch in range(cfg.epochs):
        enc = _epoch_targets(train_enc, cfg, root, epoch)
        perm = root.derive(SHUFFLE_STREAM, epoch).generator().permutation(len(enc))
        for start in range(0, len(enc), cfg.batch):
            batch = enc.take(perm[start:start + cfg.batch])
            params, res = G.gca_training_step(batch, params, mode, gcfg, cfg.mc_T, opts, root, step,
                                              cfg.dropout, hp, cfg.perturb_scale)
            if on_step is not None:
                on_step(step, res.bundle)
            step += 1
        log.debug("epoch %d done (%d steps)", epoch, step)
    return params


def train_run(cfg: RunConfig):
    """Train and write checkpoint, losses.csv, config.json and val metrics."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _, train_enc = load_split(cfg.data, "train")
    with open(out / "losses.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_COLUMNS)

        def on_step(step, b):
            w.writerow([step, b.mode] + [repr(float(getattr(b, k))) for k in LOSS_COLUMNS[2:]])

        params = train(cfg, train_enc, on_step)
    save_checkpoint(params, out / "checkpoint.bin", out / "checkpoint.json", cfg.model_config())
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    val_records, val_enc = load_split(cfg.data, "val")
    summary = evaluate(params, val_records, val_enc, cfg)["summary"]
    summary["uncertainty"] = analyze(params, val_records, val_enc, cfg)["summary_stats"]
    write_json(out / "metrics.json", {"mode": cfg.mode, "seed": cfg.seed, "split": "val", **summary})
    return params


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def load_run(run_dir):
    run = Path(run_dir)
    cbin, cjson = run / "checkpoint.bin", run / "checkpoint.json"
    if not cbin.exists() or not cjson.exists():
        raise FileNotFoundError(f"missing checkpoint in {run}")
    params, _ = load_checkpoint(cbin, cjson)
    cfg_path = run / "config.json"
    cfg = RunConfig.from_dict(json.loads(cfg_path.read_text())) if cfg_path.exists() else RunConfig()
    return params, cfg


# --- evaluation ----------------------------------------------------------------

def evaluate(params, records, enc, cfg: RunConfig, with_emd=True):
    """Consensus accuracy plus rank correlation and EMD against gt attention."""
    y, _, alpha = predict(params, enc)
    pred = y.argmax(axis=1)
    rows = []
    for rec, k, a in zip(records, pred, alpha):
        answer = D.ANSWERS[k]
        gt = rec.attention
        try:
            rc = M.rank_correlation(a, gt)
        except ValueError:
            rc = float("nan")   # constant gt map (uniform attention)
        rows.append({"record_id": rec.record_id, "qtype": rec.qtype, "predicted": answer,
                     "gt_answer": rec.gt_answer,
                     "accuracy": M.vqa_accuracy(answer, rec.annotations),
                     "rank_correlation": rc,
                     "emd": M.emd_2d(a / a.sum(), gt) if with_emd else float("nan")})
    rows.sort(key=lambda r: r["record_id"])
    acc = np.array([r["accuracy"] for r in rows])
    rc = np.array([r["rank_correlation"] for r in rows])
    emd = np.array([r["emd"] for r in rows])
    summary = {
        "n": len(rows),
        "accuracy": float(acc.mean()),
        "accuracy_by_qtype": {q: float(np.mean([r["accuracy"] for r in rows if r["qtype"] == q]))
                              for q in ("color", "count", "exist")
                              if any(r["qtype"] == q for r in rows)},
        "rank_correlation": float(np.nanmean(rc)) if np.isfinite(rc).any() else float("nan"),
        "rank_correlation_undefined": int(np.isnan(rc).sum()),
        "emd": float(emd.mean()),
    }
    return {"summary": summary, "rows": rows}


def analyze(params, records, enc, cfg: RunConfig, T=None):
    """MC-dropout predictive uncertainty against misclassification."""
    T = T or cfg.analysis_T
    mc = L.MCConfig(T, RngStream(cfg.seed).derive(ANALYSIS_STREAM), cfg.perturb_scale)
    p_bar, v = L.mc_predictive_distribution(params, enc, cfg.dropout, mc)
    y, _, _ = predict(params, enc)
    pred = y.argmax(axis=1)
    gaps = M.top2_gap(y)
    rows = []
    for i, rec in enumerate(records):
        est = L.predictive_uncertainty(p_bar[i], v[:, i])
        p_mis = min(max(1.0 - p_bar[i, enc.targets[i]], 0.0), 1.0 - 1e-15)
        rows.append({"record_id": rec.record_id, "qtype": rec.qtype,
                     "sigma2_p": est.sigma2_p, "entropy": est.H,
                     "mean_aleatoric": est.mean_aleatoric,
                     "correct": bool(pred[i] == enc.targets[i]),
                     "p_misclassification": p_mis,
                     "classification_error": float(M.classification_error(p_mis)),
                     "top2_gap": float(gaps[i])})
    rows.sort(key=lambda r: r["record_id"])
    s2 = np.array([r["sigma2_p"] for r in rows])
    correct = np.array([r["correct"] for r in rows])
    report = M.uncertainty_error_analysis(s2, correct, [r["classification_error"] for r in rows])
    scatter = report.pop("scatter")
    top2 = np.array([r["top2_gap"] for r in rows])
    stats = {
        **report,
        "T": T,
        "sigma2_p_mean": float(s2.mean()),
        "sigma2_p_std": float(s2.std()),
        "entropy_mean": float(np.mean([r["entropy"] for r in rows])),
        "mean_aleatoric_mean": float(np.mean([r["mean_aleatoric"] for r in rows])),
        "top2_gap_correct": float(top2[correct].mean()) if correct.any() else float("nan"),
        "top2_gap_incorrect": float(top2[~correct].mean()) if (~correct).any() else float("nan"),
        "misclassification_rate": float(1.0 - correct.mean()),
    }
    return {"summary_stats": stats, "rows": rows, "scatter": scatter}


def write_rows(path, rows):
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def write_analysis(out_dir, result):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_rows(out / "records.csv", result["rows"])
    write_json(out / "summary.json", result["summary_stats"])
    sc = result["scatter"]
    write_rows(out / "scatter_uncertainty_vs_error.csv",
               [{"sigma2_p": a, "classification_error": b, "correct": c}
                for a, b, c in zip(sc["sigma2_p"], sc["classification_error"], sc["correct"])])
    write_rows(out / "top2_gap.csv", [{"record_id": r["record_id"], "qtype": r["qtype"],
                                        "correct": r["correct"], "top2_gap": r["top2_gap"]}
                                       for r in result["rows"]])


# --- explanation ---------------------------------------------------------------

def explain_record(params, rec, cfg: RunConfig):
    """Heatmap, raw map and certainty mask for one record."""
    enc = D.encode_records([rec])
    fp = ForwardPass(params, enc.scenes, enc.bow)
    target = np.array([int(fp.logits[0].argmax())])
    mode = L.get_mode(cfg.mode)
    explain_mode = mode if mode.uses_variance else L.get_mode("a-gca")
    mc = L.MCConfig(cfg.mc_T, RngStream(cfg.seed).derive(ANALYSIS_STREAM, 1), cfg.perturb_scale)
    if explain_mode.distorted == "predictive":
        from .model import DropoutSpec
        for t in range(cfg.mc_T):
            fp.add_head(DropoutSpec(cfg.dropout, mc.stream.derive(100 + t)))
    batch = D.EncodedBatch(enc.scenes, enc.bow, target, enc.attention)
    _, cot_y, cot_u = L.step_objective(fp, batch.targets, explain_mode, mc, cfg.loss_hyper())
    _, grad_y = fp.head_backward(cot_y, want_params=False)
    _, grad_u = fp.head_backward(cot_u, want_params=False)
    mask = G.certainty_mask(grad_u, grad_y, cfg.gca_config(), batched=True)
    field = G.inject_residual_gradient(grad_y, mask)
    # descent direction, so cells supporting the answer light up
    heat = G.certainty_map(fp.F[0], -field[0])
    return {"record_id": rec.record_id, "mode": cfg.mode, "answer": D.ANSWERS[target[0]],
            "heatmap": heat, "attention": fp.alpha[0], "mask": mask[0].sum(axis=-1)}


def write_explanation(out_dir, exp, scale=32):
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{exp['record_id']}_{exp['mode']}"
    img = np.round(np.clip(exp["heatmap"], 0, 1) * 255).astype(np.uint8)
    img = np.kron(img, np.ones((scale, scale), dtype=np.uint8))
    Image.fromarray(img, mode="L").save(out / f"{stem}.png", optimize=False)
    write_json(out / f"{stem}.json", {
        "record_id": exp["record_id"], "mode": exp["mode"], "answer": exp["answer"],
        "heatmap": exp["heatmap"], "attention": exp["attention"], "mask_uv": exp["mask"]})
    return out / f"{stem}.png", out / f"{stem}.json"


# --- ablation --------------------------------------------------------------------

ABLATION_MODES = tuple(L.MODES)
ABLATION_COLUMNS = ("mode", "seed", "accuracy", "rank_correlation", "emd", "auroc",
                    "mean_sigma2_p_correct", "mean_sigma2_p_incorrect",
                    "top2_gap_correct", "misclassification_rate", "train_seconds")


def run_one(cfg: RunConfig, test_records, test_enc, train_enc):
    t0 = time.process_time()
    params = train(cfg, train_enc)
    seconds = time.process_time() - t0
    ev = evaluate(params, test_records, test_enc, cfg)["summary"]
    an = analyze(params, test_records, test_enc, cfg)["summary_stats"]
    return params, {
        "mode": cfg.mode, "seed": cfg.seed, "accuracy": ev["accuracy"],
        "rank_correlation": ev["rank_correlation"], "emd": ev["emd"],
        "auroc": an["auroc_misclassification"],
        "mean_sigma2_p_correct": an["mean_sigma2_p_correct"],
        "mean_sigma2_p_incorrect": an["mean_sigma2_p_incorrect"],
        "top2_gap_correct": an["top2_gap_correct"],
        "misclassification_rate": an["misclassification_rate"],
        "train_seconds": seconds,
    }


def ablate(cfg: RunConfig, modes=ABLATION_MODES, seeds=(0, 1, 2), out=None, save_runs=True):
    """Train every mode for every seed; write ablation.csv and a per-mode summary."""
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _, train_enc = load_split(cfg.data, "train")
    test_records, test_enc = load_split(cfg.data, "test")
    rows = []
    for mode in modes:
        for seed in seeds:
            run_cfg = cfg.replace(mode=mode, seed=seed, out=str(out / f"{mode}_s{seed}"))
            params, row = run_one(run_cfg, test_records, test_enc, train_enc)
            if save_runs:
                rd = Path(run_cfg.out)
                rd.mkdir(parents=True, exist_ok=True)
                save_checkpoint(params, rd / "checkpoint.bin", rd / "checkpoint.json",
                                run_cfg.model_config())
                (rd / "config.json").write_text(json.dumps(run_cfg.to_dict(), indent=2,
                                                           sort_keys=True) + "\n")
            log.info("%s seed %d: acc %.4f rc %.4f emd %.4f", mode, seed, row["accuracy"],
                     row["rank_correlation"], row["emd"])
            rows.append(row)
    write_rows(out / "ablation.csv", [{k: r[k] for k in ABLATION_COLUMNS} for r in rows])
    summary = summarize_ablation(rows)
    write_rows(out / "ablation_summary.csv", summary)
    return rows


def summarize_ablation(rows):
    out = []
    for mode in ABLATION_MODES:
        rs = [r for r in rows if r["mode"] == mode]
        if not rs:
            continue
        out.append({"mode": mode, "n_seeds": len(rs),
                    **{k: float(np.mean([r[k] for r in rs])) for k in ABLATION_COLUMNS[2:]}})
    return out


def read_ablation(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["seed"] = int(r["seed"])
        for k in ABLATION_COLUMNS[2:]:
            r[k] = float(r[k])
    return rows
