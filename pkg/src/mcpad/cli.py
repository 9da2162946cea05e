"""``mcpad`` command line: gen, train, score, eval.

Exit codes::

    0  success
    1  other I/O failure (e.g. output not writable)
    2  bad config (unreadable, malformed JSON, unknown key, out of range)
    3  data layout problem (missing manifest, split or frame)
    4  corrupt input file; the message names it
    5  undefined metric; the message names it
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

from mcpad import detector, metrics, preprocess, scoring, synthgen
from mcpad.config import RunConfig, load_config
from mcpad.errors import (
    ConfigError,
    CorruptFileError,
    DataLayoutError,
    UndefinedMetricError,
    UnlearnableDatasetError,
)
from mcpad.metrics import ScoredSample

log = logging.getLogger("mcpad")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_LAYOUT, EXIT_CORRUPT, EXIT_METRIC = 0, 1, 2, 3, 4, 5
SCORE_FIELDS = ("id", "split", "label", "attack_type", "score")
SCORED_SPLITS = ("dev", "eval")


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def _rows_by_split(data) -> dict[str, list[synthgen.ManifestRow]]:
    rows = synthgen.read_manifest(data)
    by_split = {s: [] for s in synthgen.SPLITS}
    for r in rows:
        by_split[r.split].append(r)
    return by_split


def _require_splits(by_split, names, data) -> None:
    missing = [s for s in names if not by_split[s]]
    if missing:
        raise DataLayoutError(f"{data}: manifest has no samples in split(s) {', '.join(missing)}")


def _composites(data, row, cfg: RunConfig) -> list[preprocess.CompositeImage]:
    return [preprocess.preprocess_frame(f, cfg.preprocess) for f in synthgen.load_frames(data, row)]


def _scenes(data, rows, cfg: RunConfig) -> list:
    """One training scene per frame; attacks are labeled non-face."""
    scenes = []
    for row in rows:
        cls = detector.CLASS_NAMES.index(detector.BONAFIDE if row.cls == synthgen.BONAFIDE else detector.NONFACE)
        for img in _composites(data, row, cfg):
            scenes.append((img, [(row.box, cls)]))
    return scenes


# --- commands ---------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = _config(args)
    rows = synthgen.generate_dataset(cfg.gen, args.out)
    counts = {s: sum(r.split == s for r in rows) for s in synthgen.SPLITS}
    print(f"wrote {len(rows)} samples to {args.out} ({', '.join(f'{k} {v}' for k, v in counts.items())})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    by_split = _rows_by_split(args.data)
    _require_splits(by_split, ("train", "dev"), args.data)
    t0 = time.perf_counter()
    train_set = _scenes(args.data, by_split["train"], cfg)
    dev_set = _scenes(args.data, by_split["dev"], cfg)
    result = detector.train(
        train_set,
        cfg.train,
        cfg.loss,
        cfg.grid,
        val=dev_set,
        beta=cfg.beta,
        pos_thr=cfg.pos_iou,
        neg_thr=cfg.neg_iou,
    )
    out = Path(args.out)
    detector.save_model(result.model, out)
    log_path = train_log_path(out)
    with open(log_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("epoch", "train_loss", "dev_loss"))
        for h in result.history:
            w.writerow((h.epoch, repr(h.train_loss), repr(h.dev_loss)))
    print(
        f"trained {cfg.train.epochs} epochs on {len(train_set)} frames in {time.perf_counter() - t0:.1f}s; "
        f"selected epoch {result.selected_epoch}; model {out}, log {log_path}"
    )
    return EXIT_OK


def train_log_path(model_path) -> Path:
    p = Path(model_path)
    return p.with_name(p.stem + ".log.csv")


def score_sample(model, images, cfg: RunConfig) -> scoring.PadScore:
    """PAD score of one sample: per-frame scores, then the video aggregate."""
    frame_scores = []
    for img in images:
        dets = detector.forward(model, img, cfg.scoring.det_threshold)
        det = scoring.select_detection(dets, cfg.scoring.det_threshold)
        frame_scores.append(scoring.pad_score(det, cfg.scoring.floor))
    return scoring.aggregate_video(frame_scores, cfg.scoring.aggregation)


def cmd_score(args) -> int:
    cfg = _config(args)
    model = detector.load_model(args.model)
    by_split = _rows_by_split(args.data)
    _require_splits(by_split, SCORED_SPLITS, args.data)
    rows = sorted((r for s in SCORED_SPLITS for r in by_split[s]), key=lambda r: r.id)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SCORE_FIELDS)
        for row in rows:
            score = score_sample(model, _composites(args.data, row, cfg), cfg)
            w.writerow((row.id, row.split, row.label, row.attack_type, repr(score.value)))
    print(f"scored {len(rows)} samples into {args.out}")
    return EXIT_OK


def read_scores(path) -> dict[str, list[ScoredSample]]:
    """Score CSV grouped by split, rows in file order."""
    out: dict[str, list[ScoredSample]] = {}
    try:
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            if tuple(reader.fieldnames or ()) != SCORE_FIELDS:
                raise CorruptFileError(path, f"header must be {','.join(SCORE_FIELDS)}")
            for rec in reader:
                try:
                    s = ScoredSample(rec["id"], rec["label"], float(rec["score"]), rec["attack_type"] or None)
                except (TypeError, ValueError) as exc:
                    raise CorruptFileError(path, f"bad row {rec}: {exc}") from exc
                out.setdefault(rec["split"], []).append(s)
    except OSError as exc:
        raise CorruptFileError(path, f"unreadable: {exc.strerror}") from exc
    return out


def _split_json(rep: metrics.SplitReport) -> dict:
    return {
        "apcer": rep.apcer,
        "bpcer": rep.bpcer,
        "acer": rep.acer,
        "apcer_by_type": rep.apcer_by_type,
        "apcer_ap": rep.apcer_ap,
        "acer_ap": rep.acer_ap,
        "n_bonafide": rep.n_bonafide,
        "n_attack": rep.n_attack,
    }


def evaluate(by_split: dict, cfg: RunConfig) -> tuple[dict, list, list]:
    """Report dict, EPC points and eval ROC points for grouped scores."""
    missing = [s for s in SCORED_SPLITS if s not in by_split]
    if missing:
        raise DataLayoutError(f"score file has no {', '.join(missing)} rows")
    dev, ev = by_split["dev"], by_split["eval"]
    dev_bona, _ = metrics.split_scores(dev)
    if dev_bona.size == 0:
        raise UndefinedMetricError("BPCER", "no bonafide samples in dev split")
    tau = metrics.threshold_at_bpcer(dev_bona, cfg.metrics.target_bpcer)
    report = {
        "threshold": tau,
        "target_bpcer": cfg.metrics.target_bpcer,
        "dev": _split_json(metrics.split_report(dev, tau, "dev")),
        "eval": _split_json(metrics.split_report(ev, tau, "eval")),
    }
    epc = metrics.epc_curve(dev, ev, metrics.alpha_grid(cfg.metrics.alpha_grid_size))
    roc = metrics.roc_points(ev)
    return report, epc, roc


def cmd_eval(args) -> int:
    cfg = _config(args)
    report, epc, roc = evaluate(read_scores(args.scores), cfg)
    out = Path(args.out)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    epc_path, roc_path = out.with_name(out.stem + ".epc.csv"), out.with_name(out.stem + ".roc.csv")
    with open(epc_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("alpha", "dev_threshold", "eval_hter"))
        for p in epc:
            w.writerow((repr(p.alpha), repr(p.dev_threshold), repr(p.eval_hter)))
    with open(roc_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("threshold", "apcer", "bpcer"))
        for p in roc:
            w.writerow((repr(p.threshold), repr(p.apcer), repr(p.bpcer)))
    print(format_table(report))
    return EXIT_OK


def format_table(report: dict) -> str:
    lines = [f"threshold (dev BPCER {100 * report['target_bpcer']:g}%): {report['threshold']:.6f}"]
    lines.append(f"{'':16}{'dev':>10}{'eval':>10}")
    for key in ("apcer", "bpcer", "acer", "apcer_ap", "acer_ap"):
        lines.append(f"{key.upper():16}{100 * report['dev'][key]:9.2f}%{100 * report['eval'][key]:9.2f}%")
    for t in sorted(report["eval"]["apcer_by_type"]):
        d = report["dev"]["apcer_by_type"].get(t)
        dev_cell = f"{100 * d:9.2f}%" if d is not None else f"{'-':>10}"
        lines.append(f"  {t:14}{dev_cell}{100 * report['eval']['apcer_by_type'][t]:9.2f}%")
    return "\n".join(lines)


# --- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcpad", description="Multi-channel face detection as presentation attack detection.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config (defaults when omitted)")
        p.add_argument("--seed", type=int, help="override gen.seed and train.seed")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the detector on the train split, selecting on dev")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="model file; the training log goes next to it")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="write PAD scores for the dev and eval splits")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--model", required=True, help="trained model file")
    p.add_argument("--out", required=True, help="score CSV")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="error rates at the dev BPCER threshold, EPC and ROC")
    common(p)
    p.add_argument("--scores", required=True, help="score CSV from `mcpad score`")
    p.add_argument("--out", required=True, help="JSON report; EPC and ROC CSVs go next to it")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataLayoutError, UnlearnableDatasetError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_LAYOUT
    except CorruptFileError as exc:
        print(f"corrupt input: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except UndefinedMetricError as exc:
        print(f"undefined metric {exc.metric}: {exc}", file=sys.stderr)
        return EXIT_METRIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
