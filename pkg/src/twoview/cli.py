"""``twoview`` command line.

Settings resolve as: command-line flag > environment variable > config file > default.
Environment variables are ``TWOVIEW_`` plus the upper-cased key with dots and dashes
turned into underscores (``TWOVIEW_STAGE_A_EPOCHS``). The config file holds
``key=value`` lines; keys may carry a section prefix (``stage_a.epochs=30``) which
wins over the bare key for that stage. ``#`` starts a comment.

Exit codes: 0 ok, 1 other failure, 2 usage error, 3 missing file, 4 invalid or
corrupt input, 5 model/reference fingerprint mismatch, 6 no leaf detected or
training diverged.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

from . import evalkit, metricnet, refstore
from .dataset import (LeafSample, Taxonomy, load_split, load_taxonomy, read_image, scan_corpus,
                      write_image, write_split)
from .errors import MissingFileError, TwoViewError, ValidationError
from .hclassifier import classify
from .pairgen import PairSpec, generate_pairs, load_pairs, save_pairs
from .pipeline import STAGES, StageConfig, compute_views
from .preprocess import PreprocessConfig, make_views
from .synthbench import SynthSpec, generate

log = logging.getLogger("twoview")

ENV_PREFIX = "TWOVIEW_"
STAGE_SECTION = {"genus": "stage_a", "species": "stage_b"}

DEFAULTS = {
    "crop_size": 64, "kernel_radius": 3, "polarity": "dark",
    "k": 30, "n_r": 6, "top_n": 5, "seed": 0,
    "epochs": 20, "batch_size": 32, "learning_rate": 0.001, "momentum": 0.9,
    "backbone": "small4", "positive": 400, "negative": 600,
    "test_per_class": 15, "workers": 1,
}
_TYPES = {k: type(v) for k, v in DEFAULTS.items()}


def read_config(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}: line {lineno}: expected key=value")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


class Settings:
    """Resolves one setting through flag, environment, config file and default."""

    def __init__(self, args, section: str | None = None):
        self.args = args
        self.section = section
        self.config = read_config(args.config) if getattr(args, "config", None) else {}

    def _env(self, key):
        names = [key] if self.section is None else [f"{self.section}.{key}", key]
        for n in names:
            v = os.environ.get(ENV_PREFIX + n.upper().replace(".", "_").replace("-", "_"))
            if v is not None:
                return v
        return None

    def get(self, key):
        v = getattr(self.args, key, None)
        if v is not None:
            return v
        raw = self._env(key)
        if raw is None and self.section is not None:
            raw = self.config.get(f"{self.section}.{key}")
        if raw is None:
            raw = self.config.get(key)
        if raw is None:
            return DEFAULTS.get(key)
        typ = _TYPES.get(key, str)
        try:
            return typ(raw)
        except ValueError as exc:
            raise ValidationError(f"bad value for {key}: {raw!r}") from exc

    def preprocess(self) -> PreprocessConfig:
        return PreprocessConfig(self.get("crop_size"), self.get("kernel_radius"), self.get("polarity"))

    def train_config(self) -> metricnet.TrainConfig:
        return metricnet.TrainConfig(num_epochs=self.get("epochs"), batch_size=self.get("batch_size"),
                                     learning_rate=self.get("learning_rate"), momentum=self.get("momentum"),
                                     seed=self.get("seed"), backbone_id=self.get("backbone"))

    def stage_config(self, stage) -> StageConfig:
        return StageConfig.for_stage(stage, positive_count=self.get("positive"),
                                     negative_count=self.get("negative"), train=self.train_config())


# --------------------------------------------------------------------------- helpers

def _emit(args, payload, text=None):
    if getattr(args, "json", False):
        print(json.dumps(payload, sort_keys=True, default=evalkit._jsonable))
    elif text:
        print(text)


def _data_paths(args):
    root = args.root
    tax = args.taxonomy
    manifest = getattr(args, "manifest", None)
    if getattr(args, "data", None):
        d = Path(args.data)
        root = root or d / "images"
        tax = tax or d / "taxonomy.csv"
        if manifest is None and (d / "test_manifest.txt").is_file():
            manifest = d / "test_manifest.txt"
    if root is None or tax is None:
        raise ValidationError("give --data DIR or both --root and --taxonomy")
    return Path(root), Path(tax), manifest


def _load_split(args, settings):
    root, tax_path, manifest = _data_paths(args)
    taxonomy = load_taxonomy(tax_path)
    if manifest is not None:
        return load_split(root, taxonomy, manifest=manifest)
    return load_split(root, taxonomy, test_per_class=settings.get("test_per_class"), seed=settings.get("seed"))


def _add_data_args(p, manifest=True):
    p.add_argument("--data", help="directory with images/, taxonomy.csv and optional test_manifest.txt")
    p.add_argument("--root", help="corpus root <root>/<species_id>/<sample_id>.png")
    p.add_argument("--taxonomy", help="taxonomy CSV")
    if manifest:
        p.add_argument("--manifest", help="test-set manifest, one sample_id per line")
        p.add_argument("--test-per-class", dest="test_per_class", type=int)


def _add_pre_args(p):
    p.add_argument("--crop-size", dest="crop_size", type=int, choices=(32, 64, 128))
    p.add_argument("--kernel-radius", dest="kernel_radius", type=int)
    p.add_argument("--polarity", choices=("dark", "bright"))


def _add_model_args(p):
    p.add_argument("--model-a", dest="model_a", required=True, help="genus/global model file")
    p.add_argument("--model-b", dest="model_b", required=True, help="species/local model file")


def _add_train_args(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--backbone", choices=sorted(metricnet.BACKBONES))
    p.add_argument("--positive", type=int, help="positive pair count")
    p.add_argument("--negative", type=int, help="negative pair count")


def _load_models(args):
    return metricnet.load(args.model_a), metricnet.load(args.model_b)


def _context(args, settings):
    split = _load_split(args, settings)
    a, b = _load_models(args)
    return evalkit.EvalContext(split.train, split.test, split.taxonomy, a, b, settings.preprocess())


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------- subcommands

def cmd_synth(args):
    s = Settings(args)
    spec = SynthSpec(num_genera=args.genera, species_per_genus=args.species_per_genus,
                     samples_per_species=args.samples, test_per_species=args.test_per_species,
                     image_size=args.image_size, shape_noise=args.shape_noise,
                     texture_noise=args.texture_noise, seed=s.get("seed"), first_genus=args.first_genus)
    split, _ = generate(spec)
    write_split(split, _out(args))
    _emit(args, {"images": len(split.train) + len(split.test), "species": len(split.taxonomy),
                 "out": str(args.out)}, f"wrote {len(split.train) + len(split.test)} images to {args.out}")


def cmd_preprocess(args):
    s = Settings(args)
    cfg = s.preprocess()
    out = _out(args)
    samples = scan_corpus(args.root)
    for smp in samples:
        vp = make_views(smp, cfg)
        write_image(vp.global_view, out / f"{smp.sample_id}.global.png")
        write_image(vp.local_view, out / f"{smp.sample_id}.local.png")
    _emit(args, {"views": len(samples), "out": str(out)}, f"wrote {len(samples)} view pairs to {out}")


def cmd_make_pairs(args):
    s = Settings(args, STAGE_SECTION[args.stage])
    split = _load_split(args, s)
    grouping, view = STAGES[args.stage]
    spec = PairSpec(grouping=grouping, view=view, positive_count=s.get("positive"),
                    negative_count=s.get("negative"), seed=s.get("seed"))
    pairs = generate_pairs(split.train, split.taxonomy, spec)
    out = _out(args)
    save_pairs(pairs, out / f"pairs_{args.stage}.csv")
    for w in pairs.warnings:
        log.warning(w)
    _emit(args, {"pairs": len(pairs), "warnings": pairs.warnings, "file": str(out / f"pairs_{args.stage}.csv")},
          f"wrote {len(pairs)} pairs")


def cmd_train(args):
    s = Settings(args, STAGE_SECTION[args.stage])
    split = _load_split(args, s)
    pairs = load_pairs(args.pairs)
    grouping, view = STAGES[args.stage]
    if (pairs.spec.grouping, pairs.spec.view) != (grouping, view):
        raise ValidationError(f"pair file is for {pairs.spec.grouping}/{pairs.spec.view}, not stage {args.stage}")
    lookup = {smp.sample_id: smp for smp in split.train}
    ids = sorted({p.left for p in pairs} | {p.right for p in pairs})
    missing = [i for i in ids if i not in lookup]
    if missing:
        raise ValidationError(f"pair ids not among training samples: {missing[:5]}")
    pre = s.preprocess()
    views = compute_views([lookup[i] for i in ids], pre)
    images = {i: views[i].view(view) for i in ids}
    cfg = s.train_config()
    model = metricnet.SiameseModel(images[ids[0]].shape, view, grouping, cfg.backbone_id, seed=cfg.seed,
                                   channel_mean=metricnet.fit_channel_mean(list(images.values())))
    model, trace = metricnet.train(model, pairs.pairs, images, cfg)
    out = _out(args)
    name = "model_a" if args.stage == "genus" else "model_b"
    metricnet.save(model, out / f"{name}.scnn")
    metricnet.write_loss_trace(trace, out / f"{name}_loss.csv")
    _emit(args, {"model": str(out / f"{name}.scnn"), "fingerprint": model.fingerprint(), "loss": trace},
          f"saved {out / f'{name}.scnn'}")


def cmd_build_refs(args):
    s = Settings(args)
    split = _load_split(args, s)
    a, b = _load_models(args)
    sel = refstore.select_references(split.train, split.taxonomy, s.get("n_r"), seed=s.get("seed"))
    refset = refstore.build(sel.sample_ids, split.train, split.taxonomy, a, b, s.preprocess(), s.get("n_r"))
    refstore.save(refset, _out(args))
    _emit(args, {"entries": len(refset), "species": len(refset.species), "warnings": sel.warnings},
          f"built {len(refset)} references for {len(refset.species)} species")


def cmd_add_species(args):
    s = Settings(args)
    refset = refstore.load(args.refs)
    a, b = _load_models(args)
    rows = load_taxonomy(args.taxonomy)
    samples = scan_corpus(args.root, rows)
    new = refstore.add_species(refset, samples, rows, a, b, s.preprocess(), seed=s.get("seed"))
    refstore.save(new, _out(args))
    _emit(args, {"entries": len(new), "species": len(new.species)},
          f"reference set now has {len(new.species)} species")


def cmd_classify(args):
    s = Settings(args)
    a, b = _load_models(args)
    refset = refstore.load(args.refs)
    refset.check_models(a, b)
    src = Path(args.input)
    if src.is_dir():
        paths = sorted(src.rglob("*.png"))
    elif src.is_file():
        paths = [src]
    else:
        raise MissingFileError(f"input not found: {src}")
    pre, k, top_n = s.preprocess(), s.get("k"), s.get("top_n")

    def one(path):
        c = classify(LeafSample(path.stem, read_image(path)), a, b, refset, k, top_n, pre)
        return c.report(diagnostics=args.diagnostics)

    workers = s.get("workers")
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            reports = list(pool.map(one, paths))
    else:
        reports = [one(p) for p in paths]
    if args.out:
        out = _out(args)
        for r in reports:
            (out / f"{r['query_id']}.json").write_text(json.dumps(r, indent=1, sort_keys=True) + "\n")
    if args.json:
        print(json.dumps(reports, sort_keys=True))
    else:
        for r in reports:
            top = ", ".join(f"{x['species_id']}:{x['zeta']:.4f}" for x in r["ranking"])
            print(f"{r['query_id']}\t{top}")


def _parse_ints(text):
    return tuple(int(x) for x in str(text).split(",") if x.strip())


def cmd_evaluate(args):
    s = Settings(args)
    ctx = _context(args, s)
    refset = refstore.load(args.refs)
    rep = evalkit.evaluate(ctx, refset, s.get("k"), _parse_ints(args.top_k))
    rep.write(_out(args))
    _emit(args, rep.to_dict(), " ".join(f"{k}={v:.4f}" for k, v in rep.metrics.items()))


def cmd_sweep(args):
    s = Settings(args)
    ctx = _context(args, s)
    rep = evalkit.sweep_references(ctx, _parse_ints(args.n_r_values), _parse_ints(args.k_values), s.get("seed"))
    out = _out(args)
    rep.write(out)
    if args.plot:
        evalkit.plot_sweep(rep, out / "sweep.png")
    _emit(args, rep.to_dict(), json.dumps(rep.metrics))


def cmd_stability(args):
    s = Settings(args)
    ctx = _context(args, s)
    rep = evalkit.stability_run(ctx, args.repetitions, s.get("seed"), s.get("n_r"), s.get("k"))
    rep.write(_out(args))
    _emit(args, rep.to_dict(), json.dumps(rep.metrics))


def cmd_scalability(args):
    s = Settings(args)
    ctx = _context(args, s)
    if len(args.extra_root) != len(args.extra_taxonomy):
        raise ValidationError("--extra-root and --extra-taxonomy must be given in pairs")
    batches = []
    for root, tax in zip(args.extra_root, args.extra_taxonomy):
        rows = load_taxonomy(tax)
        extra = load_split(root, rows, test_per_class=s.get("test_per_class"), seed=s.get("seed"))
        batches.append(evalkit.SpeciesBatch(extra.train, extra.test, rows))
    rep = evalkit.scalability_run(ctx, batches, s.get("n_r"), s.get("k"), s.get("seed"),
                                  model_paths=[args.model_a, args.model_b])
    out = _out(args)
    rep.write(out)
    if args.plot:
        evalkit.plot_scalability(rep, out / "scalability.png")
    _emit(args, rep.to_dict(), json.dumps(rep.metrics))


def cmd_unbalanced(args):
    s = Settings(args)
    split = _load_split(args, s)
    sa = Settings(args, "stage_a").stage_config("genus")
    sb = Settings(args, "stage_b").stage_config("species")
    rep = evalkit.unbalanced_run(split.train, split.test, split.taxonomy, _parse_ints(args.caps), sa, sb,
                                 s.get("n_r"), s.get("k"), s.preprocess(), s.get("seed"),
                                 augment_to=args.augment_to)
    rep.write(_out(args))
    _emit(args, rep.to_dict(), json.dumps(rep.metrics))


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--json", action="store_true", help="machine-readable output on stdout")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="twoview", description="Two-view hierarchical leaf classification")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("synth", parents=[common], help="generate the synthetic benchmark")
    q.add_argument("--out", required=True)
    q.add_argument("--genera", type=int, default=6)
    q.add_argument("--species-per-genus", dest="species_per_genus", type=int, default=3)
    q.add_argument("--samples", type=int, default=21)
    q.add_argument("--test-per-species", dest="test_per_species", type=int, default=15)
    q.add_argument("--image-size", dest="image_size", type=int, default=192)
    q.add_argument("--shape-noise", dest="shape_noise", type=float, default=1.0)
    q.add_argument("--texture-noise", dest="texture_noise", type=float, default=1.0)
    q.add_argument("--first-genus", dest="first_genus", type=int, default=0)
    q.set_defaults(func=cmd_synth)

    q = sub.add_parser("preprocess", parents=[common], help="write global/local view PNGs")
    q.add_argument("--root", required=True)
    q.add_argument("--out", required=True)
    _add_pre_args(q)
    q.set_defaults(func=cmd_preprocess)

    q = sub.add_parser("make-pairs", parents=[common], help="write a pair manifest")
    _add_data_args(q)
    q.add_argument("--stage", choices=("genus", "species"), required=True)
    q.add_argument("--positive", type=int)
    q.add_argument("--negative", type=int)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_make_pairs)

    q = sub.add_parser("train", parents=[common], help="train model A (genus) or B (species)")
    _add_data_args(q)
    _add_pre_args(q)
    _add_train_args(q)
    q.add_argument("--stage", choices=("genus", "species"), required=True)
    q.add_argument("--pairs", required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("build-refs", parents=[common], help="select and embed references")
    _add_data_args(q)
    _add_pre_args(q)
    _add_model_args(q)
    q.add_argument("--n-r", dest="n_r", type=int)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_build_refs)

    q = sub.add_parser("add-species", parents=[common], help="extend a reference set without retraining")
    q.add_argument("--refs", required=True)
    q.add_argument("--root", required=True, help="corpus of the new species")
    q.add_argument("--taxonomy", required=True, help="taxonomy rows of the new species")
    _add_pre_args(q)
    _add_model_args(q)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_add_species)

    q = sub.add_parser("classify", parents=[common], help="rank species for images")
    q.add_argument("--input", required=True, help="PNG file or directory")
    q.add_argument("--refs", required=True)
    _add_model_args(q)
    _add_pre_args(q)
    q.add_argument("--k", type=int)
    q.add_argument("--top-n", dest="top_n", type=int)
    q.add_argument("--diagnostics", action="store_true", help="include R_k, weights and S_i")
    q.add_argument("--workers", type=int)
    q.add_argument("--out")
    q.set_defaults(func=cmd_classify)

    q = sub.add_parser("evaluate", parents=[common], help="accuracy/S metric on the test split")
    _add_data_args(q)
    _add_pre_args(q)
    _add_model_args(q)
    q.add_argument("--refs", required=True)
    q.add_argument("--k", type=int)
    q.add_argument("--top-k", dest="top_k", default="1,3,5")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_evaluate)

    q = sub.add_parser("sweep", parents=[common], help="N_r x k grid")
    _add_data_args(q)
    _add_pre_args(q)
    _add_model_args(q)
    q.add_argument("--n-r-values", dest="n_r_values", default="1,2,3,4,5,6")
    q.add_argument("--k-values", dest="k_values", default="5,15,30,50")
    q.add_argument("--plot", action="store_true")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_sweep)

    q = sub.add_parser("stability", parents=[common], help="repeat with distinct reference draws")
    _add_data_args(q)
    _add_pre_args(q)
    _add_model_args(q)
    q.add_argument("--repetitions", type=int, default=5)
    q.add_argument("--n-r", dest="n_r", type=int)
    q.add_argument("--k", type=int)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_stability)

    q = sub.add_parser("scalability", parents=[common], help="add unseen species batches")
    _add_data_args(q)
    _add_pre_args(q)
    _add_model_args(q)
    q.add_argument("--extra-root", dest="extra_root", action="append", default=[])
    q.add_argument("--extra-taxonomy", dest="extra_taxonomy", action="append", default=[])
    q.add_argument("--n-r", dest="n_r", type=int)
    q.add_argument("--k", type=int)
    q.add_argument("--plot", action="store_true")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_scalability)

    q = sub.add_parser("unbalanced", parents=[common], help="retrain with per-class caps")
    _add_data_args(q)
    _add_pre_args(q)
    _add_train_args(q)
    q.add_argument("--caps", default="1,3,6")
    q.add_argument("--augment-to", dest="augment_to", type=int)
    q.add_argument("--n-r", dest="n_r", type=int)
    q.add_argument("--k", type=int)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_unbalanced)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except TwoViewError as exc:
        print(f"twoview {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"twoview {args.command}: {exc}", file=sys.stderr)
        return MissingFileError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
