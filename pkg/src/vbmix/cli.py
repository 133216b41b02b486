"""Command-line front end: ``vbmix simulate|train|translate|fit|evaluate``.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numerical
failure. Logs go to stderr as ``key=value`` lines; artifacts go only to the
output paths.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import NumericalError, ValidationError
from .population import (
    TrainOptions,
    default_jobs,
    load_model,
    save_model,
    train_population,
)
from .subject import EQ16_VARIANTS, FitOptions, TemplatePrior, fit_subject
from .translate import predict_missing, psnr_parts, run_dropout_experiment, run_fov_experiment
from .volume import (
    SCHEMES,
    MultiChannelVolume,
    atomic_write_bytes,
    generate_phantom,
    phantom_spec_from_dict,
    read_volume,
    write_volume,
)

log = logging.getLogger("vbmix")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _stem(path) -> str:
    p = Path(path)
    return p.stem if p.suffix in (".json", ".raw") else p.name


def _read_inputs(paths) -> tuple[list[str], list[MultiChannelVolume]]:
    if not paths:
        raise ValidationError("no input volumes given")
    return [_stem(p) for p in paths], [read_volume(p) for p in paths]


def cmd_simulate(args) -> None:
    spec_path = Path(args.spec)
    try:
        doc = json.loads(spec_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"phantom spec {spec_path} not found") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{spec_path}:{exc.lineno}: {exc.msg}") from None
    spec = phantom_spec_from_dict(doc, base_dir=spec_path.parent)
    seed = args.seed if args.seed is not None else spec.seed
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    out = Path(args.out)
    truth = out / "truth"
    truth.mkdir(parents=True, exist_ok=True)
    subjects = []
    for i in range(args.n):
        name = f"subject_{i:03d}"
        vol, labels = generate_phantom(spec.with_seed(seed + i))
        write_volume(vol, out / name)
        write_volume(MultiChannelVolume(vol.dims, labels.astype(np.float32)), truth / f"{name}_labels")
        subjects.append(
            {"name": name, "seed": seed + i, "volume": f"{name}.json", "labels": f"truth/{name}_labels.json"}
        )
    params = {
        "dims": list(spec.dims),
        "means": spec.means.tolist(),
        "covariances": spec.covariances.tolist(),
        "source": doc,
    }
    _write_text(truth / "params.json", json.dumps(params, indent=2) + "\n")
    manifest = {"seed": seed, "n": args.n, "subjects": subjects}
    _write_text(truth / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    log.info("event=simulate n=%d seed=%d out=%s", args.n, seed, out)


def cmd_train(args) -> None:
    _, volumes = _read_inputs(args.inputs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    template = None
    template_path = None
    if args.template:
        tvol = read_volume(args.template)
        if tvol.channels != args.k:
            raise ValidationError(f"template has {tvol.channels} classes but --k is {args.k}")
        template = TemplatePrior(tvol.data.astype(float), np.zeros(args.k))
        template_path = os.path.relpath(Path(args.template).with_suffix(".json"), out.parent)
    options = TrainOptions(
        outer_iters=args.outer_iters,
        fit=FitOptions(max_iters=args.inner_iters, eq16_variant=args.eq16),
        seed=args.seed,
        jobs=args.jobs,
    )
    model, trace = train_population(volumes, template, args.k, options)
    model.template_path = template_path
    save_model(model, out)
    lines = ["outer_iter,combined_elbo"] + [f"{i},{float(v)!r}" for i, v in enumerate(trace)]
    _write_text(out.with_name(out.stem + "_trace.csv"), "\n".join(lines) + "\n")
    log.info("event=train K=%d subjects=%d final_elbo=%.10g out=%s", args.k, len(volumes), trace[-1], out)


def cmd_translate(args) -> None:
    model = load_model(args.model)
    vol = read_volume(args.input)
    if vol.channels != model.channels:
        raise ValidationError(f"model has M={model.channels} but the volume has {vol.channels}")
    ref = read_volume(args.ref) if args.ref else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    post, trace = fit_subject(vol, model, FitOptions(max_iters=args.iters, eq16_variant=args.eq16))
    result = predict_missing(vol, post)
    write_volume(result.completed, out / "completed")
    write_volume(result.uncertainty_volume(), out / "uncertainty")
    lines = ["iter,elbo"] + [f"{i},{float(v)!r}" for i, v in enumerate(trace.values)]
    _write_text(out / "elbo_trace.csv", "\n".join(lines) + "\n")
    if ref is not None:
        from .translate import CSV_HEADER, format_number

        rows = [CSV_HEADER]
        missing_frac = 1.0 - vol.observed.mean(axis=0)
        for c in range(vol.channels):
            p, mse, maxval = psnr_parts(ref, result.completed, c)
            rows.append(
                f"translate,{_stem(args.input)},{c},{float(missing_frac[c])!r},"
                f"{format_number(p)},{format_number(mse)},{format_number(maxval)},"
            )
        _write_text(out / "report.csv", "\n".join(rows) + "\n")
    log.info("event=translate iters=%d missing=%d out=%s", len(trace), vol.n_missing, out)


def _parse_list(text, conv, what):
    try:
        return [conv(x) for x in text.split(",") if x.strip() != ""]
    except ValueError:
        raise UsageError(f"cannot parse {what} {text!r}") from None


def cmd_evaluate(args) -> None:
    model = load_model(args.model)
    names, volumes = _read_inputs(args.inputs)
    for n, v in zip(names, volumes):
        if v.channels != model.channels:
            raise ValidationError(f"{n} has {v.channels} channels, model expects {model.channels}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    options = FitOptions(max_iters=args.iters)
    if args.mode == "fov":
        fractions = _parse_list(args.fractions, float, "fractions")
        if not fractions or any(not 0 <= f <= 1 for f in fractions):
            raise UsageError("fractions must lie in [0, 1]")
        if args.channels:
            channels = _parse_list(args.channels, int, "channels")
        else:
            channels = list(range(1, model.channels))
        report = run_fov_experiment(
            model, volumes, channels, fractions, args.scheme, options, names, args.seed, args.jobs
        )
    else:
        sets = None
        if args.observed:
            sets = [_parse_list(s, int, "observed set") for s in args.observed]
        report = run_dropout_experiment(model, volumes, sets, options, names, args.jobs)
    if not report.rows:
        raise ValidationError("experiment produced no rows (nothing was missing)")
    report.write(out / f"{args.mode}.csv", timings=args.timings)
    _write_text(out / f"{args.mode}_summary.csv", report.summary_csv())
    log.info("event=evaluate mode=%s subjects=%d rows=%d out=%s", args.mode, len(volumes), len(report.rows), out)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vbmix", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate synthetic phantoms")
    p.add_argument("--spec", required=True, help="phantom spec JSON")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--seed", type=int, default=None, help="overrides the spec seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="learn population hyperpriors")
    p.add_argument("--inputs", nargs="*", required=True)
    p.add_argument("--k", type=int, default=12)
    p.add_argument("--template", default=None, help="K-channel volume of template logits")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--outer-iters", type=int, default=10)
    p.add_argument("--inner-iters", type=int, default=30)
    p.add_argument("--eq16", choices=EQ16_VARIANTS, default="standard")
    p.add_argument("--jobs", type=int, default=default_jobs())
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    for name in ("translate", "fit"):
        p = sub.add_parser(name, help="fit one subject and fill in missing channels")
        p.add_argument("--model", required=True)
        p.add_argument("--in", dest="input", required=True)
        p.add_argument("--ref", default=None)
        p.add_argument("--iters", type=int, default=30)
        p.add_argument("--eq16", choices=EQ16_VARIANTS, default="standard")
        p.add_argument("--out", required=True)
        p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="run a masking experiment and write PSNR CSVs")
    p.add_argument("--mode", choices=("fov", "dropout"), required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--inputs", nargs="*", required=True)
    p.add_argument("--fractions", default="0.25,0.5,0.75,1.0")
    p.add_argument("--channels", default=None, help="channels to mask (fov); default all but 0")
    p.add_argument("--scheme", choices=SCHEMES, default="slab-inferior")
    p.add_argument("--observed", action="append", help="observed set for dropout, e.g. 0,1")
    p.add_argument("--iters", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=default_jobs())
    p.add_argument("--timings", action="store_true", help="fill the seconds column")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="level=%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        args.func(args)
    except UsageError as exc:
        log.error("event=usage_error msg=%r", str(exc))
        return EXIT_USAGE
    except NumericalError as exc:
        log.error("event=numerical_failure msg=%r", str(exc))
        return EXIT_NUMERIC
    except (ValidationError, OSError) as exc:
        log.error("event=data_error msg=%r", str(exc))
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
