"""Command-line pipeline: train-baseline, heatmap, cluster, gen-triggers, embed,
verify, attack, eval and the ``pipeline`` meta-command.

Every command reads its inputs from and writes its outputs to one work
directory, and leaves a ``<command>.manifest`` recording the config snapshot,
seeds, input/output hashes and timing.  Inputs are checked against the
manifests of the commands that produced them, so a stale chain fails early.

Exit codes: 0 success / verified, 2 not verified, 1 error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, attacks, clustering, config, data, heatmap, metrics, nn, plotting
from . import trigger, watermark

log = logging.getLogger("fdwm")

M0, M1 = "m0.ckpt", "m1.ckpt"
HEATMAP = "heatmap"
SENS, MASK = "sensitivity.pbm", "mask.pbm"
B1, B2, T2 = "B1", "B2", "T2"
EXIT_OK, EXIT_ERROR, EXIT_NOT_VERIFIED = 0, 1, 2


class PipelineError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# hashing and manifests


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dataset_fingerprint(bundle: data.DatasetBundle) -> str:
    h = hashlib.sha256()
    for part in (bundle.D1, bundle.D2, bundle.E):
        for arr in (part.images, part.labels, part.ids):
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def read_manifest(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        key, eq, value = line.partition("=")
        if eq:
            out[key] = value
    return out


class Run:
    """One command invocation inside a work directory."""

    def __init__(self, command: str, workdir: Path, cfg: dict, export_key: bool = False,
                 threads: int = 1):
        self.command = command
        self.workdir = workdir
        self.cfg = cfg
        self.export_key = export_key
        self.threads = threads
        self.inputs: dict[str, str] = {}
        self.outputs: list[Path] = []
        self.extra: dict[str, object] = {}
        self.started = time.perf_counter()
        self._bundle = None
        workdir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.workdir / name

    # inputs ---------------------------------------------------------------

    def bundle(self) -> data.DatasetBundle:
        if self._bundle is None:
            self._bundle = load_bundle(self.cfg)
            self.inputs["dataset"] = dataset_fingerprint(self._bundle)
        return self._bundle

    def need(self, name: str) -> Path:
        """Register an upstream artifact after checking it is present and fresh."""
        path = self.path(name)
        if not path.exists():
            raise PipelineError(f"missing {name} in {self.workdir}; run its producing "
                                "command first")
        check_fresh(self.workdir, name, self.inputs.get("dataset"))
        self.inputs[name] = sha256_file(path)
        return path

    # outputs --------------------------------------------------------------

    def wrote(self, *paths) -> None:
        self.outputs.extend(Path(p) for p in paths)

    def finish(self) -> Path:
        lines = [f"command={self.command}", f"version={__version__}"]
        lines += config.snapshot(self.cfg, self.export_key)
        lines += [f"input.{k}={v}" for k, v in sorted(self.inputs.items())]
        lines += [f"output.{p.name}={sha256_file(p)}" for p in self.outputs]
        lines += [f"result.{k}={v}" for k, v in self.extra.items()]
        lines.append(f"time.elapsed_s={time.perf_counter() - self.started:.3f}")
        path = self.path(f"{self.command}.manifest")
        path.write_text("\n".join(lines) + "\n")
        return path


def producer_of(workdir: Path, name: str) -> tuple[Path, dict] | None:
    for man in sorted(workdir.glob("*.manifest")):
        fields = read_manifest(man)
        if f"output.{name}" in fields:
            return man, fields
    return None


def check_fresh(workdir: Path, name: str, dataset_hash: str | None = None) -> None:
    """Raise if ``name`` changed after it was written or one of its inputs changed since."""
    found = producer_of(workdir, name)
    if found is None:
        return  # produced outside the pipeline; nothing to compare against
    man, fields = found
    if sha256_file(workdir / name) != fields[f"output.{name}"]:
        raise PipelineError(f"stale artifact: {name} was modified after "
                            f"{fields.get('command')} wrote it ({man.name})")
    for key, recorded in fields.items():
        if not key.startswith("input."):
            continue
        upstream = key[len("input."):]
        if upstream == "dataset":
            if dataset_hash is not None and dataset_hash != recorded:
                raise PipelineError(f"stale artifact: {name} was built from a different "
                                    f"dataset; re-run {fields.get('command')}")
            continue
        path = workdir / upstream
        if not path.exists() or sha256_file(path) != recorded:
            raise PipelineError(f"stale artifact: {name} depends on {upstream}, which "
                                f"changed since {fields.get('command')} ran")


# --------------------------------------------------------------------------
# shared helpers


def load_bundle(cfg: dict) -> data.DatasetBundle:
    source = cfg["data.source"]
    if source == "synthetic":
        return data.gen_synthetic(cfg["data.seed"], cfg["data.classes"], cfg["data.per_class"],
                                  cfg["data.height"], cfg["data.width"], cfg["data.channels"])
    if source == "cifar10":
        if not cfg["data.path"]:
            raise PipelineError("data.path is not set (CIFAR-10 binary batches directory)")
        return data.load_cifar10(cfg["data.path"], cfg["data.seed"])
    raise PipelineError(f"unknown data.source {source!r}")


def train_config(cfg: dict) -> nn.TrainConfig:
    return nn.TrainConfig(lr=cfg["train.lr"], momentum=cfg["train.momentum"],
                          batch_size=cfg["train.batch_size"], epochs=cfg["train.epochs"],
                          seed=cfg["train.seed"])


def _eval_split(bundle, plan):
    return bundle.E.take(plan.U)


def _partition(cfg, bundle):
    return data.make_partition(bundle, cfg["trigger.q_t"], cfg["trigger.partition_seed"])


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(x: float) -> str:
    return f"{x:.4f}"


# --------------------------------------------------------------------------
# commands


def cmd_train_baseline(run: Run) -> int:
    bundle = run.bundle()
    model = nn.init(run.cfg["train.arch"], bundle.class_count, run.cfg["train.init_seed"],
                    input_shape=bundle.image_shape)
    m0, history = nn.train(model, bundle.D1, bundle.D2, train_config(run.cfg))
    m0.meta.update({"role": "baseline", "init_seed": run.cfg["train.init_seed"]})
    nn.save_checkpoint(run.path(M0), m0)
    fig = plotting.plot_history(history, run.path("m0_history.png"), "baseline training")
    run.wrote(run.path(M0), fig)
    acc = nn.evaluate(m0, bundle.E)
    run.extra["test_accuracy"] = _fmt(acc)
    print(f"baseline test accuracy {acc:.4f} -> {run.path(M0)}")
    return EXIT_OK


def cmd_heatmap(run: Run) -> int:
    bundle = run.bundle()
    m0 = nn.load_checkpoint(run.need(M0))
    eval_set = bundle.D2 if run.cfg["heatmap.eval"] == "val" else bundle.E
    hm = heatmap.compute_heatmap(m0, eval_set, run.cfg["heatmap.samples_per_freq"],
                                 (run.cfg["heatmap.lam_lo"], run.cfg["heatmap.lam_hi"]),
                                 run.cfg["heatmap.seed"], threads=run.threads)
    hm.meta["model_sha256"] = run.inputs[M0][:16]
    files = heatmap.export_heatmap(hm, run.path(HEATMAP))
    fig = plotting.plot_heatmap(hm.t, run.path("heatmap.png"), run.cfg["cluster.rho"])
    run.wrote(*files, fig)
    run.extra["max_error"] = _fmt(float(hm.t.max()))
    print(f"heat map: max error {hm.t.max():.4f}, min {hm.t.min():.4f} -> {files[0]}")
    return EXIT_OK


def cmd_cluster(run: Run) -> int:
    run.need(HEATMAP + ".fdwm")
    hm = heatmap.load_heatmap(run.path(HEATMAP))
    smap = heatmap.sensitivity_map(hm, run.cfg["cluster.rho"])
    cmap = clustering.clustering_map(hm, smap, run.cfg["cluster.seed"],
                                     run.cfg["cluster.selection"])
    run.path(SENS).write_bytes(clustering.to_pbm_bytes(smap.s))
    run.path(MASK).write_bytes(clustering.to_pbm_bytes(cmap.mask))
    fig = plotting.plot_mask(cmap.mask, run.path("mask.png"))
    run.wrote(run.path(SENS), run.path(MASK), fig)
    run.extra["sensitive_positions"] = int(smap.s.sum())
    run.extra["mask_positions"] = int(cmap.mask.sum())
    shown = cmap.positions[:8]
    more = " ..." if len(cmap.positions) > len(shown) else ""
    print(f"sensitive positions {int(smap.s.sum())}, clustering map positions "
          f"{int(cmap.mask.sum())} {shown}{more}")
    return EXIT_OK


def _key(run: Run, mask, channels: int) -> trigger.PerturbationKey:
    c = run.cfg
    return trigger.generate_key(mask, channels, c["trigger.key_seed"], c["trigger.lo"],
                                c["trigger.hi"], c["trigger.per_channel"],
                                c["trigger.min_strength"])


def cmd_gen_triggers(run: Run) -> int:
    bundle = run.bundle()
    mask = clustering.ClusteringMap(clustering.read_pbm(run.need(MASK).read_bytes()))
    key = _key(run, mask, bundle.image_shape[2])
    plan = _partition(run.cfg, bundle)
    sources = {B1: bundle.D1.take(plan.A1), B2: bundle.D2.take(plan.A2),
               T2: bundle.E.take(plan.V)}
    all_labels = np.concatenate([s.labels for s in sources.values()])
    for name, src in sources.items():
        ts = trigger.gen_triggers(src, mask, key)
        ts = trigger.assign_labels(ts, run.cfg["trigger.strategy"], bundle.class_count,
                                   run.cfg["trigger.label_seed"], source_labels=all_labels)
        run.wrote(*trigger.save_trigger_set(run.path(name), ts, MASK))
        if name == T2:
            quality = metrics.quality_report(src.images, ts.images, src.ids)
            quality.write_csv(run.path("quality.csv"))
            fig = plotting.plot_triggers(src.images, ts.images, run.path("triggers.png"))
            run.wrote(run.path("quality.csv"), fig)
            run.extra["mean_psnr_db"] = _fmt(quality.mean_psnr)
            run.extra["mean_ssim"] = _fmt(quality.mean_ssim)
            run.extra["identical_pairs"] = quality.infinite_count
            label = int(ts.labels[0])
    run.extra["key_fingerprint"] = key.fingerprint()
    if run.export_key:
        kpath = run.path("key.txt")
        kpath.write_text(f"seed={key.seed}\nlo={key.lo}\nhi={key.hi}\n"
                         f"per_channel={key.per_channel}\n")
        run.wrote(kpath)
    print(f"triggers: q_t={plan.q_t}, label={label}, key {key.fingerprint()}, "
          f"mean PSNR {run.extra['mean_psnr_db']} dB, mean SSIM {run.extra['mean_ssim']}")
    return EXIT_OK


def cmd_embed(run: Run) -> int:
    bundle = run.bundle()
    b1 = trigger.load_trigger_set(run.need(B1 + ".fdwm").with_suffix(""))
    b2 = trigger.load_trigger_set(run.need(B2 + ".fdwm").with_suffix(""))
    run.need(B1 + ".txt")
    run.need(B2 + ".txt")
    plan = _partition(run.cfg, bundle)
    job = watermark.EmbeddingJob(bundle, plan, b1, b2, run.cfg["trigger.strategy"],
                                 run.cfg["train.arch"], train_config(run.cfg),
                                 run.cfg["train.init_seed"])
    m1, history = watermark.embed(job)
    nn.save_checkpoint(run.path(M1), m1)
    fig = plotting.plot_history(history, run.path("m1_history.png"), "watermark embedding")
    run.wrote(run.path(M1), fig)
    U = _eval_split(bundle, plan)
    acc = watermark.accuracy(m1, U.images, U.labels)
    run.extra["clean_accuracy_U"] = _fmt(acc)
    print(f"marked model: clean accuracy on U {acc:.4f} -> {run.path(M1)}")
    return EXIT_OK


def cmd_verify(run: Run, model_name: str = M1, attack: str = "") -> int:
    model = nn.load_checkpoint(run.need(model_name))
    t2 = trigger.load_trigger_set(run.need(T2 + ".fdwm").with_suffix(""))
    run.need(T2 + ".txt")
    attack = attack or run.cfg["verify.attack"] or None
    report = watermark.verify(model, t2, run.cfg["verify.delta"], attack)
    stem = "verify" if model_name == M1 else f"verify_{Path(model_name).stem}"
    run.path(stem + ".txt").write_text(f"model={model_name}\n" + report.to_text())
    run.path(stem + ".csv").write_text(report.to_csv())
    run.wrote(run.path(stem + ".txt"), run.path(stem + ".csv"))
    run.extra["trigger_accuracy"] = _fmt(report.accuracy)
    run.extra["verified"] = report.verified
    print(report.to_text(), end="")
    return EXIT_OK if report.verified else EXIT_NOT_VERIFIED


def cmd_attack(run: Run, spec: str = "") -> int:
    spec = spec or run.cfg["attack.spec"]
    if not spec:
        raise PipelineError("no attack given (use --spec or attack.spec)")
    desc = attacks.AttackDescriptor.parse(spec)
    bundle = run.bundle()
    plan = _partition(run.cfg, bundle)
    m1 = nn.load_checkpoint(run.need(M1))
    t2 = trigger.load_trigger_set(run.need(T2 + ".fdwm").with_suffix(""))
    row = attack_row(desc, m1, bundle, plan, t2, train_config(run.cfg))
    if desc.kind in attacks.MODEL_ATTACKS:
        attacked = row.pop("model")
        nn.save_checkpoint(run.path("m1_attacked.ckpt"), attacked)
        run.wrote(run.path("m1_attacked.ckpt"))
    else:
        row.pop("model")
        attacked_t2 = t2.with_images(attacks.apply_image_attack(t2.images, desc))
        run.wrote(*trigger.save_trigger_set(run.path("T2_attacked"), attacked_t2, MASK))
    _write_csv(run.path("attack.csv"), ["attack", "acc_o", "acc_w"],
               [[row["attack"], _fmt(row["acc_o"]), _fmt(row["acc_w"])]])
    run.wrote(run.path("attack.csv"))
    run.extra.update({"acc_o": _fmt(row["acc_o"]), "acc_w": _fmt(row["acc_w"])})
    print(f"{row['attack']}: clean accuracy {row['acc_o']:.4f}, "
          f"trigger accuracy {row['acc_w']:.4f}")
    return EXIT_OK


def attack_row(desc, model, bundle, plan, t2, cfg) -> dict:
    """Clean accuracy on U and trigger accuracy on T2 after one attack."""
    U = _eval_split(bundle, plan)
    if desc.kind in attacks.MODEL_ATTACKS:
        attacked = attacks.apply_model_attack(model, desc, bundle.D2, cfg)
        acc_o = watermark.accuracy(attacked, U.images, U.labels)
        acc_w = watermark.trigger_accuracy(attacked, t2)
    else:
        attacked = model
        acc_o = watermark.accuracy(model, attacks.apply_image_attack(U.images, desc), U.labels)
        acc_w = watermark.verify(model, t2, attack=desc).accuracy
    return {"attack": str(desc), "acc_o": acc_o, "acc_w": acc_w, "model": attacked}


def cmd_eval(run: Run) -> int:
    bundle = run.bundle()
    plan = _partition(run.cfg, bundle)
    m0 = nn.load_checkpoint(run.need(M0))
    m1 = nn.load_checkpoint(run.need(M1))
    t2 = trigger.load_trigger_set(run.need(T2 + ".fdwm").with_suffix(""))
    U = _eval_split(bundle, plan)
    acc0 = watermark.accuracy(m0, U.images, U.labels)
    acc1 = watermark.accuracy(m1, U.images, U.labels)
    rows = [
        {"attack": "none (baseline)", "acc_o": acc0,
         "acc_w": watermark.trigger_accuracy(m0, t2)},
        {"attack": "none", "acc_o": acc1, "acc_w": watermark.trigger_accuracy(m1, t2)},
    ]
    for spec in filter(None, (s.strip() for s in run.cfg["eval.attacks"].split(";"))):
        row = attack_row(attacks.AttackDescriptor.parse(spec), m1, bundle, plan, t2,
                         train_config(run.cfg))
        row.pop("model")
        rows.append(row)
        log.info("%s: acc_o=%.4f acc_w=%.4f", row["attack"], row["acc_o"], row["acc_w"])
    _write_csv(run.path("eval.csv"), ["attack", "acc_o", "acc_w"],
               [[r["attack"], _fmt(r["acc_o"]), _fmt(r["acc_w"])] for r in rows])
    gap = abs(acc0 - acc1)
    _write_csv(run.path("fidelity.csv"), ["acc_baseline", "acc_marked", "gap"],
               [[_fmt(acc0), _fmt(acc1), _fmt(gap)]])
    fig = plotting.plot_robustness(rows, run.path("robustness.png"))
    run.wrote(run.path("eval.csv"), run.path("fidelity.csv"), fig)
    run.extra["fidelity_gap"] = _fmt(gap)
    print(f"fidelity: baseline {acc0:.4f}, marked {acc1:.4f}, gap {gap:.4f}")
    for r in rows:
        print(f"  {r['attack']:<32} acc_o {r['acc_o']:.4f}  acc_w {r['acc_w']:.4f}")
    return EXIT_OK


COMMANDS = {
    "train-baseline": cmd_train_baseline,
    "heatmap": cmd_heatmap,
    "cluster": cmd_cluster,
    "gen-triggers": cmd_gen_triggers,
    "embed": cmd_embed,
    "verify": cmd_verify,
    "attack": cmd_attack,
    "eval": cmd_eval,
}
PIPELINE = ("train-baseline", "heatmap", "cluster", "gen-triggers", "embed", "verify")


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", "-w", default="fdwm-run", type=Path,
                        help="artifact directory (default: %(default)s)")
    common.add_argument("--config", "-c", help="key=value config file or a manifest to replay")
    common.add_argument("--profile", default="default", choices=sorted(config.PROFILES))
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config value (repeatable)")
    common.add_argument("--threads", type=int, default=1,
                        help="worker threads for the heat-map sweep (default 1)")
    common.add_argument("--export-key", action="store_true",
                        help="write the secret trigger key to key.txt and the manifests")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fdwm", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"fdwm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "verify":
            p.add_argument("--model", default=M1, help="checkpoint name in the workdir")
            p.add_argument("--attack", default="", help='e.g. "jpeg:qf=60"')
        if name == "attack":
            p.add_argument("--spec", default="", help='e.g. "prune:rate=0.3"')
    p = sub.add_parser("pipeline", parents=[common],
                       help="train-baseline through verify, then eval")
    p.add_argument("--no-eval", action="store_true")
    return parser


def _dispatch(name: str, args, cfg: dict) -> int:
    run = Run(name, args.workdir, cfg, args.export_key, args.threads)
    if name == "verify":
        code = cmd_verify(run, args.model, args.attack)
    elif name == "attack":
        code = cmd_attack(run, args.spec)
    else:
        code = COMMANDS[name](run)
    run.finish()
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise PipelineError("--threads must be >= 1")
        cfg = config.load(args.config, args.profile, args.overrides)
        if args.command != "pipeline":
            return _dispatch(args.command, args, cfg)
        args.model, args.attack = M1, ""
        code = EXIT_OK
        for name in PIPELINE:
            log.info("pipeline: %s", name)
            code = _dispatch(name, args, cfg)
        if not args.no_eval:
            _dispatch("eval", args, cfg)
        return code
    except (PipelineError, config.ConfigError, clustering.DegenerateInputError,
            data.IngestionError, nn.DescriptorError, nn.TrainingDiverged,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
