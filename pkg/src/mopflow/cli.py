"""Command-line driver: ``mopflow {flow,segment,train,predict,eval,selftest}``.

Each stage reads and writes files under the output directory::

    <out>/flow/<seq>/<frame>.flo  and  .png     (flow)
    <out>/masks/<seq>/<frame>.png              (segment)
    <out>/segnet/checkpoint.bin, loss.csv      (train)
    <out>/predict/<seq>/<frame>.png            (predict)
    <out>/eval/report.csv, report.txt          (eval)

Frame ``t`` is paired with ``t + 1``; the last frame of a sequence has no
forward flow and therefore no mask.
"""
import argparse
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import checks, dataset_io, evaluation, mop, segnet_micro, synthetic
from .config import PipelineConfig, dump_config, load_config, override
from .flow_solver import endpoint_error, estimate_flow

log = logging.getLogger("mopflow")


class StageError(RuntimeError):
    pass


def worker_count():
    n = os.cpu_count() or 1
    env = os.environ.get("MOPFLOW_THREADS")
    if env:
        try:
            cap = int(env)
        except ValueError:
            raise StageError(f"MOPFLOW_THREADS must be an integer, got {env!r}") from None
        if cap < 1:
            raise StageError("MOPFLOW_THREADS must be >= 1")
        n = min(n, cap)
    return n


def _map(fn, jobs):
    """Run ``fn`` over ``jobs``; results come back in job order either way."""
    n = min(worker_count(), len(jobs))
    if n <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, jobs))


def _index(cfg, sequences):
    if not cfg.data.root:
        raise StageError("no dataset root given (use --root or data.root)")
    return dataset_io.load_davis_index(cfg.data.root, cfg.data.split or None, sequences)


def _stem(path):
    return Path(path).stem


# -- stages ---------------------------------------------------------------


def _flow_job(job):
    cfg, seq, t, out_dir = job
    I1 = dataset_io.load_image(seq.frames[t], cfg.data.size)
    I2 = dataset_io.load_image(seq.frames[t + 1], cfg.data.size)
    res = estimate_flow(I1, I2, cfg.energy, cfg.solver)
    stem = _stem(seq.frames[t])
    dataset_io.write_flo(out_dir / f"{stem}.flo", res.forward)
    dataset_io.write_rgb_png(out_dir / f"{stem}.png", mop.flow_to_color(res.forward))
    return f"{seq.name}/{stem}"


def run_flow(cfg, sequences=None):
    index = _index(cfg, sequences)
    out = Path(cfg.data.out) / "flow"
    jobs = []
    for seq in index.sequences:
        if len(seq.frames) < 2:
            log.warning("%s: fewer than two frames, skipped", seq.name)
            continue
        for t in range(len(seq.frames) - 1):
            jobs.append((cfg, seq, t, out / seq.name))
    for done in _map(_flow_job, jobs):
        log.info("flow %s", done)
    return len(jobs)


def _flow_files(flow_dir, seq_name):
    d = Path(flow_dir) / seq_name
    files = sorted(d.glob("*.flo"))
    if not files:
        raise StageError(f"no .flo files under {d} (run 'flow' first)")
    return files


def run_segment(cfg, sequences=None, flow_dir=None):
    index = _index(cfg, sequences)
    flow_dir = Path(flow_dir or Path(cfg.data.out) / "flow")
    out = Path(cfg.data.out) / "masks"
    n = 0
    for seq in index.sequences:
        for f in _flow_files(flow_dir, seq.name):
            mask, props = mop.segment_flow(dataset_io.read_flo(f), cfg.mop)
            dataset_io.write_mask_png(out / seq.name / f"{f.stem}.png", mask)
            log.info("segment %s/%s: %d proposals", seq.name, f.stem, len(props))
            n += 1
    return n


def _training_pairs(cfg, index, flow_dir):
    pairs = []
    for seq in index.sequences:
        if not seq.annotations:
            raise StageError(f"sequence {seq.name!r} has no annotations to train on")
        anns = {_stem(a): a for a in seq.annotations}
        for f in _flow_files(flow_dir, seq.name):
            if f.stem not in anns:
                raise StageError(f"no annotation for {seq.name}/{f.stem}")
            flow = dataset_io.read_flo(f).astype(np.float64)
            pairs.append((flow, dataset_io.binarize_annotation(anns[f.stem], flow.shape[:2])))
    return pairs


def run_train(cfg, sequences=None, flow_dir=None):
    index = _index(cfg, sequences)
    flow_dir = Path(flow_dir or Path(cfg.data.out) / "flow")
    pairs = _training_pairs(cfg, index, flow_dir)
    net, losses = segnet_micro.train(
        pairs, cfg.train, seed=cfg.seed, log_every=100, logger=log
    )
    out = Path(cfg.data.out) / "segnet"
    out.mkdir(parents=True, exist_ok=True)
    segnet_micro.save_checkpoint(net, out / "checkpoint.bin")
    segnet_micro.write_loss_csv(out / "loss.csv", losses, cfg.train)
    return losses


def run_predict(cfg, sequences=None, flow_dir=None, checkpoint=None):
    index = _index(cfg, sequences)
    flow_dir = Path(flow_dir or Path(cfg.data.out) / "flow")
    ckpt = Path(checkpoint or Path(cfg.data.out) / "segnet" / "checkpoint.bin")
    if not ckpt.is_file():
        raise StageError(f"checkpoint {ckpt} not found (run 'train' first)")
    net = segnet_micro.load_checkpoint(ckpt)
    out = Path(cfg.data.out) / "predict"
    n = 0
    for seq in index.sequences:
        for f in _flow_files(flow_dir, seq.name):
            mask = segnet_micro.predict_mask(net, dataset_io.read_flo(f))
            dataset_io.write_mask_png(out / seq.name / f"{f.stem}.png", mask)
            n += 1
    return n


def _mask_dir_sequences(d):
    d = Path(d)
    if not d.is_dir():
        raise StageError(f"mask directory {d} not found")
    return sorted(p.name for p in d.iterdir() if p.is_dir())


def run_eval(cfg, sequences=None, pred_dir=None, gt_dir=None):
    """Score predicted masks; ground truth comes from ``gt_dir`` or the dataset annotations.

    The scored frames are the frames present in the prediction directory.
    Against the dataset, a split list is required and only sequences that
    are both listed and predicted are scored.
    """
    pred_dir = Path(pred_dir or Path(cfg.data.out) / "masks")
    names = _mask_dir_sequences(pred_dir)
    if sequences:
        missing = sorted(set(sequences) - set(names))
        if missing:
            raise StageError(f"no predictions for: {', '.join(missing)}")
        names = [n for n in names if n in set(sequences)]
    gt_lookup = {}
    if gt_dir is None:
        # scores against the dataset must say which split they cover
        if not cfg.data.split:
            raise StageError("scoring against dataset annotations needs an explicit --split list")
        index = _index(cfg, names)
        names = index.names()
        for seq in index.sequences:
            gt_lookup[seq.name] = {_stem(a): a for a in seq.annotations}
    else:
        for name in names:
            gt_lookup[name] = {p.stem: p for p in sorted((Path(gt_dir) / name).glob("*.png"))}
    results = {}
    for name in names:
        preds, gts = [], []
        for p in sorted((pred_dir / name).glob("*.png")):
            if p.stem not in gt_lookup.get(name, {}):
                raise StageError(f"no ground truth for {name}/{p.stem}")
            pm = dataset_io.read_mask_png(p)
            preds.append(pm)
            gts.append(dataset_io.binarize_annotation(gt_lookup[name][p.stem], pm.shape))
        if preds:
            results[name] = (preds, gts)
    if not results:
        raise StageError(f"no predicted masks under {pred_dir}")
    report = evaluation.evaluate_dataset(results)
    out = Path(cfg.data.out) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.csv", out / "report.txt")
    return report


def run_selftest(cfg):
    """Synthetic-shift EPE plus the flow and network gradient oracles."""
    ok = True
    I1, I2 = synthetic.shift_pair(64, 1, 0, seed=cfg.seed)
    res = estimate_flow(I1, I2, cfg.energy, cfg.solver)
    epe = endpoint_error(res.forward, (1.0, 0.0), border=8)
    ok &= epe < 0.5
    print(f"synthetic 1-px shift: mean interior EPE {epe:.4f} px (limit 0.5)")

    flow_err = max(checks.flow_gradient_check(20, seed=cfg.seed, cfg=cfg.energy))
    ok &= flow_err < 1e-4
    print(f"flow gradient check: max relative error {flow_err:.3e} (limit 1e-4)")

    rng = np.random.default_rng(cfg.seed)
    net = segnet_micro.NetParams.init(int(rng.integers(2**32)))
    x = rng.normal(size=(2, 8, 8))
    target = rng.random((8, 8)) > 0.5
    net_err = max(checks.network_gradient_check(net, x, target).values())
    ok &= net_err < 1e-3
    print(f"network gradient check: max relative error {net_err:.3e} (limit 1e-3)")
    print("selftest", "passed" if ok else "FAILED")
    return ok


# -- entry point ----------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--root", help="DAVIS-layout dataset root")
    common.add_argument("--split", help="file listing one sequence name per line")
    common.add_argument("--out", help="output directory (default: out)")
    common.add_argument("--seed", type=int, help="seed for every random draw")
    common.add_argument("--sequences", help="comma-separated sequence names")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mopflow", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, metavar="command")
    sub.add_parser("flow", parents=[common], help="estimate forward flow for every frame pair")
    for name, text in (("segment", "flow-magnitude proposals"), ("train", "fit the segmenter")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--flows", help="flow directory (default: <out>/flow)")
    s = sub.add_parser("predict", parents=[common], help="masks from a trained checkpoint")
    s.add_argument("--flows", help="flow directory (default: <out>/flow)")
    s.add_argument("--checkpoint", help="default: <out>/segnet/checkpoint.bin")
    s = sub.add_parser("eval", parents=[common], help="mean IoU report")
    s.add_argument("--pred", help="predicted mask directory (default: <out>/masks)")
    s.add_argument("--gt", help="ground-truth mask directory (default: dataset annotations)")
    sub.add_parser("selftest", parents=[common], help="run the synthetic oracles")
    sub.add_parser("config", parents=[common], help="print the effective config")
    return p


def resolve_config(args):
    cfg = load_config(args.config) if args.config else PipelineConfig()
    return override(cfg, root=args.root, split=args.split, out=args.out, seed=args.seed)


def dispatch(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(name)s: %(message)s",
        stream=sys.stderr,
    )
    stage = args.command
    try:
        cfg = resolve_config(args)
    except (OSError, ValueError) as exc:
        print(f"mopflow {stage}: config error: {exc}", file=sys.stderr)
        return 2
    seqs = [s for s in args.sequences.split(",") if s] if args.sequences else None
    t0 = time.perf_counter()
    try:
        if stage == "flow":
            n = run_flow(cfg, seqs)
            print(f"flow: {n} pairs -> {Path(cfg.data.out) / 'flow'}")
        elif stage == "segment":
            n = run_segment(cfg, seqs, args.flows)
            print(f"segment: {n} masks -> {Path(cfg.data.out) / 'masks'}")
        elif stage == "train":
            losses = run_train(cfg, seqs, args.flows)
            print(f"train: {len(losses)} steps, final loss {losses[-1]:.5f}")
        elif stage == "predict":
            n = run_predict(cfg, seqs, args.flows, args.checkpoint)
            print(f"predict: {n} masks -> {Path(cfg.data.out) / 'predict'}")
        elif stage == "eval":
            report = run_eval(cfg, seqs, args.pred, args.gt)
            print(report.table(), end="")
            print(f"mean IoU {report.mean_iou:.4f} over {len(report.per_sequence)} sequences")
        elif stage == "selftest":
            if not run_selftest(cfg):
                return 1
        elif stage == "config":
            print(dump_config(cfg), end="")
    except (StageError, OSError, ValueError, KeyError, IndexError, FloatingPointError) as exc:
        print(f"mopflow {stage}: error: {exc}", file=sys.stderr)
        return 1
    log.info("%s finished in %.1fs", stage, time.perf_counter() - t0)
    return 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
