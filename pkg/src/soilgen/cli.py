"""`soilgen` command line interface.

Every subcommand accepts ``--config`` (TOML, see soilgen.config), ``--set
section.key=value`` overrides, ``--seed``, ``--threads`` and ``--force``.
Outputs are never overwritten without ``--force``; each output gets a
``<output>.run.json`` manifest with the config hash, seed and versions.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .nn import CheckpointError

log = logging.getLogger("soilgen")

SUBCOMMANDS = ("ingest", "toy-data", "train-pad", "pad", "train-sogm", "generate", "train-wet", "wet",
               "integrate", "render", "eval")


class CLIError(Exception):
    """Validation failure reported to the user with exit code 1."""


# ----------------------------------------------------------------- helpers


def _out(path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and not force:
        raise CLIError(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _checkpoint(path, cls, what="model"):
    if path is None:
        raise CLIError(f"missing checkpoint: pass --{what} <ckpt>")
    if not Path(path).exists():
        raise CLIError(f"missing checkpoint: {path}")
    return cls.load(path)


def _parse_set(items) -> dict:
    out: dict = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise CLIError(f"--set expects section.key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        out.setdefault(section, {})[name] = value
    return out


def _load_property_sets(path) -> tuple[list[str], list[list[str]]]:
    """A JSON list of sentences (one set), a list of lists, or [{"id", "sentences"}]."""
    doc = json.loads(Path(path).read_text())
    if isinstance(doc, dict):
        doc = [doc]
    if not isinstance(doc, list) or not doc:
        raise CLIError(f"{path}: expected a non-empty JSON list of property sentences or sets")
    if all(isinstance(x, str) for x in doc):
        return ["set0"], [doc]
    ids, sets = [], []
    for i, entry in enumerate(doc):
        if isinstance(entry, dict):
            ids.append(str(entry.get("id", f"set{i}")))
            sets.append([str(s) for s in entry.get("sentences", [])])
        elif isinstance(entry, list):
            ids.append(f"set{i}")
            sets.append([str(s) for s in entry])
        else:
            raise CLIError(f"{path}: entry {i} is neither a sentence list nor an object")
    return ids, sets


def _full_values(spectra, padder=None) -> np.ndarray:
    from .spectra import stack

    values, mask = stack(spectra)
    if mask.all():
        return values
    if padder is None:
        raise CLIError("corpus has partial spectra; pass --padder <ckpt> to pad them first")
    return padder.transform(np.where(mask, values, np.nan))


def _write_values_csv(path, rows, ids):
    from .spectra import Spectrum, write_spectra_csv

    write_spectra_csv(path, [Spectrum.full(r, i) for r, i in zip(rows, ids)], ids)


# ---------------------------------------------------------------- commands


def cmd_ingest(args, cfg):
    from .spectra import read_spectra_csv, write_cache, write_spectra_csv

    spectra = read_spectra_csv(args.input, unit=args.unit)
    out = _out(args.out, args.force)
    if out.suffix in (".bin", ".cache"):
        write_cache(out, spectra)
    else:
        write_spectra_csv(out, spectra)
    print(f"ingested {len(spectra)} spectra -> {out}")
    return out, {"count": len(spectra)}


def cmd_toy_data(args, cfg):
    from .evaluation import ToyCorpusSpec, make_toy_corpus, make_toy_wet_corpus, write_toy_corpus

    seed = cfg["run"]["seed"]
    corpus = make_toy_corpus(ToyCorpusSpec(count=args.count, seed=seed, noise_std=args.noise))
    wet = make_toy_wet_corpus(args.wet_count, seed=seed) if args.wet_count > 0 else None
    try:
        manifest = write_toy_corpus(args.out_dir, corpus, force=args.force, wet=wet)
    except FileExistsError as exc:
        raise CLIError(str(exc)) from exc
    print(f"toy corpus ({args.count} spectra, {args.wet_count} wet pairs) -> {manifest}")
    return manifest, {"count": args.count, "wet_count": args.wet_count}


def cmd_train_pad(args, cfg):
    from .corpus import load_corpus
    from .padding import SpectraPadder

    corpus = load_corpus(args.corpus)
    out = _out(args.out, args.force)
    model = SpectraPadder(**cfgmod.model_params(cfg, "padding"))
    model.fit(corpus.spectra)
    digest = model.save(out)
    print(f"padding model trained on {len(corpus)} spectra -> {out}")
    return out, {"sha256": digest, "loss_history": model.loss_history_}


def cmd_pad(args, cfg):
    from .padding import SpectraPadder
    from .spectra import read_spectra_csv, stack

    model = _checkpoint(args.model, SpectraPadder)
    spectra = read_spectra_csv(args.input, unit=args.unit)
    out = _out(args.out, args.force)
    values, mask = stack(spectra)
    padded = model.transform(np.where(mask, values, np.nan))
    _write_values_csv(out, padded, [s.meta for s in spectra])
    print(f"padded {len(spectra)} spectra -> {out}")
    return out, {"count": len(spectra)}


def cmd_train_sogm(args, cfg):
    from .corpus import load_corpus
    from .diffusion import SOGM
    from .padding import SpectraPadder

    corpus = load_corpus(args.corpus)
    props = corpus.property_sets
    if args.props:
        from .corpus import load_properties

        props = load_properties(args.props, corpus.ids)
    padder = _checkpoint(args.padder, SpectraPadder, "padder") if args.padder else None
    Y = _full_values(corpus.spectra, padder)
    out = _out(args.out, args.force)
    model = SOGM(**cfgmod.model_params(cfg, "sogm")).fit(props, Y)
    digest = model.save(out)
    print(f"SOGM trained on {len(Y)} spectra -> {out}")
    return out, {"sha256": digest, "loss_history": model.loss_history_}


def cmd_generate(args, cfg):
    from .diffusion import SOGM
    from .evaluation import plot_overlay_svg

    model = _checkpoint(args.model, SOGM)
    if args.props is None:
        raise CLIError("pass --props <json> with the property sentences to condition on")
    if args.seeds < 1:
        raise CLIError("--seeds must be at least 1")
    ids, sets = _load_property_sets(args.props)
    base = cfg["run"]["seed"]
    seeds = list(range(base, base + args.seeds))
    out = _out(args.out, args.force)
    results = model.generate_many(sets, seeds)
    if args.mean:
        _write_values_csv(out, [r.mean for r in results], ids)
        std_path = _out(out.with_suffix(".std.csv"), args.force)
        _write_values_csv(std_path, [r.std for r in results], ids)
    else:
        rows = [row for r in results for row in r.samples]
        _write_values_csv(out, rows, [f"{i}_seed{s}" for i in ids for s in seeds])
    if args.svg:
        svg = _out(args.svg, args.force)
        plot_overlay_svg(svg, np.empty((0, 2100)), [r.mean for r in results],
                         labels=("", "generated mean"), std=[r.std for r in results])
    print(f"generated {len(sets)} x {len(seeds)} spectra -> {out}")
    return out, {"seeds": seeds, "sets": ids}


def cmd_train_wet(args, cfg):
    from .corpus import load_wet_corpus
    from .wet import train_wet

    samples = load_wet_corpus(args.corpus)
    out = _out(args.out, args.force)
    params = cfgmod.model_params(cfg, "wet")
    seed = params.pop("random_state")
    model, report, (tr, te) = train_wet(samples, test_size=args.test_size, random_state=seed, **params)
    digest = model.save(out)
    print(f"wet model: {len(tr)} train / {len(te)} test pairs, test RMSE {report.rmse:.3f}% r2 {report.r2:.3f}"
          f" -> {out}")
    return out, {"sha256": digest, "test_rmse": report.rmse, "test_r2": report.r2, "test_n": report.n}


def cmd_wet(args, cfg):
    from .spectra import read_spectra_csv
    from .wet import WetSoilModel

    model = _checkpoint(args.model, WetSoilModel)
    spectra = read_spectra_csv(args.dry)
    if args.smc < 0:
        raise CLIError("--smc must be non-negative")
    out = _out(args.out, args.force)
    wet = model.predict_wet(spectra, args.smc)
    _write_values_csv(out, wet, [s.meta for s in spectra])
    print(f"wet spectra at SMC {args.smc}% for {len(spectra)} dry spectra -> {out}")
    return out, {"smc_g": args.smc}


def cmd_integrate(args, cfg):
    from . import radiometry as rad
    from .spectra import read_spectra_csv

    spectra = read_spectra_csv(args.spectra)
    camera = rad.read_camera_csv(args.camera) if args.camera else rad.CameraResponse.flat()
    source = rad.read_source_csv(args.source) if args.source else rad.SourceSpectrum.flat()
    out = _out(args.out, args.force)
    lines = ["id," + ",".join(camera.names)]
    for s in spectra:
        vals = rad.channel_values(s, camera, source, normalize_by_cs=args.normalize_by_cs)
        lines.append(f"{s.meta}," + ",".join(repr(float(v)) for v in vals))
    out.write_text("\n".join(lines) + "\n")
    if args.prosail_dir:
        pdir = Path(args.prosail_dir)
        pdir.mkdir(parents=True, exist_ok=True)
        for s in spectra:
            rad.export_prosail_soil(s, _out(pdir / f"{s.meta}.txt", args.force))
    print(f"integrated {len(spectra)} spectra over {len(camera.names)} channels -> {out}")
    return out, {"normalize_by_cs": bool(args.normalize_by_cs)}


def load_scene(path, sogm=None, wet=None, seeds=range(10), normalize_by_cs=False):
    """Build a SoilScene from scene JSON; paths are relative to the scene file."""
    from . import radiometry as rad
    from .spectra import Spectrum, read_spectra_csv

    path = Path(path)
    root = path.parent
    doc = json.loads(path.read_text())
    light = doc.get("light", {})
    cam = doc.get("camera", {})
    source = rad.read_source_csv(root / light["source"]) if light.get("source") else rad.SourceSpectrum.flat()
    camera = rad.read_camera_csv(root / cam["response"]) if cam.get("response") else rad.CameraResponse.flat()
    patches = []
    for entry in doc.get("patches", []):
        pid = int(entry["id"])
        props = list(entry.get("properties", []))
        if "properties_file" in entry:
            _, sets = _load_property_sets(root / entry["properties_file"])
            props = sets[int(entry.get("index", 0))]
        smc = entry.get("smc_g")
        if "spectrum" in entry:
            values = np.asarray(entry["spectrum"], dtype=np.float64)
        elif "spectrum_file" in entry:
            found = {s.meta: s for s in read_spectra_csv(root / entry["spectrum_file"])}
            key = entry.get("column", next(iter(found)))
            if key not in found:
                raise CLIError(f"patch {pid}: column {key!r} not in {entry['spectrum_file']}")
            values = found[key].values
        elif props:
            if sogm is None:
                raise CLIError(f"missing checkpoint: patch {pid} is described by properties; pass --sogm <ckpt>")
            values = sogm.generate_many([props], list(seeds))[0].mean
        else:
            raise CLIError(f"patch {pid} needs a spectrum, a spectrum_file or properties")
        if smc is not None and float(smc) > 0:
            if wet is None:
                raise CLIError(f"missing checkpoint: patch {pid} sets smc_g; pass --wet <ckpt>")
            values = wet.predict_wet(values[None], float(smc))[0]
        patches.append(rad.Patch(pid, tuple(int(v) for v in entry["rect"]), Spectrum.full(values),
                                 entry.get("name", f"patch{pid}"), None if smc is None else float(smc), props))
    return rad.SoilScene(tuple(doc["grid"]), patches, source, camera, int(cam.get("width", 64)),
                         int(cam.get("height", 64)), float(light.get("zenith_deg", 0.0)),
                         float(cam.get("exposure", 1.0)),
                         bool(doc.get("normalize_by_cs", False)) or normalize_by_cs)


def cmd_render(args, cfg):
    from . import radiometry as rad
    from .diffusion import SOGM
    from .wet import WetSoilModel

    sogm = _checkpoint(args.sogm, SOGM, "sogm") if args.sogm else None
    wet = _checkpoint(args.wet, WetSoilModel, "wet") if args.wet else None
    base = cfg["run"]["seed"]
    scene = load_scene(args.scene, sogm, wet, range(base, base + args.seeds), args.normalize_by_cs)
    out_dir = Path(args.out_dir)
    targets = [out_dir / n for n in ("image.f32", "image.json", "image.png", "labels.png", "legend.json")]
    for t in targets:
        _out(t, args.force)
    result = rad.render_scene(scene)
    rad.write_float_image(out_dir / "image", result.raster, result.channels)
    rad.write_png(out_dir / "image.png", result.image8)
    rad.write_label_png(out_dir / "labels.png", result.labels)
    legend = {str(k): dict(v, color=result.patch_colors[k].tolist()) for k, v in result.legend.items()}
    (out_dir / "legend.json").write_text(json.dumps(legend, indent=2, sort_keys=True))
    print(f"rendered {scene.width}x{scene.height} scene with {len(scene.patches)} patches -> {out_dir}")
    return out_dir / "render", {"patches": len(scene.patches)}


def cmd_eval(args, cfg):
    from .corpus import load_corpus, load_wet_corpus
    from .evaluation import (PADDING_BANDS, AblationSpec, evaluate_pairs, run_ablation_protocol,
                             run_padding_protocol, write_reports)

    protocol = json.loads(Path(args.protocol).read_text()) if args.protocol else {}
    out = _out(args.out, args.force)
    _out(out.with_suffix(".csv"), args.force)
    if args.target == "pad":
        from .padding import SpectraPadder

        model = _checkpoint(args.model, SpectraPadder)
        corpus = load_corpus(args.corpus)
        bands = [tuple(b) for b in protocol.get("bands", PADDING_BANDS)]
        reports = run_padding_protocol(corpus.spectra, model, bands)
    elif args.target == "sogm":
        from .diffusion import SOGM
        from .padding import SpectraPadder

        model = _checkpoint(args.model, SOGM)
        padder = _checkpoint(args.padder, SpectraPadder, "padder") if args.padder else None
        corpus = load_corpus(args.corpus)
        limit = protocol.get("limit")
        P, S = corpus.property_sets[:limit], corpus.spectra[:limit]
        seeds = int(protocol.get("seeds", 10))
        reports = {}
        for label in protocol.get("ablations", ["All"]):
            spec = AblationSpec.parse(label)
            reports[spec.label] = run_ablation_protocol(
                P, S, lambda sets, sd: np.stack([r.mean for r in model.generate_many(sets, sd)]),
                spec, seeds=seeds, padder=padder, rng_seed=cfg["run"]["seed"])
    else:
        from .wet import WetSoilModel, samples_to_arrays

        model = _checkpoint(args.model, WetSoilModel)
        X, y = samples_to_arrays(load_wet_corpus(args.corpus))
        reports = {"wet": evaluate_pairs(model.predict(X), y, {"name": "wet"})}
    write_reports(out, reports)
    for label, rep in reports.items():
        print(f"{label}: RMSE {rep.rmse:.3f}% r2 {rep.r2:.3f} n {rep.n} skipped {rep.skipped}")
    return out, {"target": args.target}


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, help="run seed (overrides [run] seed)")
    common.add_argument("--threads", type=int, help="worker threads (fallback: $SOILGEN_THREADS, else 1)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--log-level", help="logging level (default INFO)")

    parser = argparse.ArgumentParser(prog="soilgen", description="Soil spectra generation toolkit.")
    parser.add_argument("--version", action="version", version=_version())
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")

    def add(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=func)
        return p

    p = add("ingest", cmd_ingest, "trim raw spectra to the canonical 400-2499 nm grid")
    p.add_argument("--in", dest="input", required=True, help="raw spectra CSV (wavelength_nm,<id>...)")
    p.add_argument("--unit", choices=("reflectance", "absorbance"), default="reflectance")
    p.add_argument("--out", required=True, help="canonical CSV, or .bin for the binary cache")

    p = add("toy-data", cmd_toy_data, "write a synthetic toy corpus with known ground truth")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=2000)
    p.add_argument("--wet-count", type=int, default=1670)
    p.add_argument("--noise", type=float, default=0.002, help="additive noise std (reflectance)")

    p = add("train-pad", cmd_train_pad, "train the spectra padding model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)

    p = add("pad", cmd_pad, "fill missing wavebands of spectra")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--unit", choices=("reflectance", "absorbance"), default="reflectance")
    p.add_argument("--model")
    p.add_argument("--out", required=True)

    p = add("train-sogm", cmd_train_sogm, "train the property-conditioned diffusion model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--props", help="property JSON overriding the manifest's property files")
    p.add_argument("--padder", help="padding checkpoint for partial spectra")
    p.add_argument("--out", required=True)

    p = add("generate", cmd_generate, "generate spectra from property sentences")
    p.add_argument("--model")
    p.add_argument("--props")
    p.add_argument("--seeds", type=int, default=10, help="number of seeds, starting at --seed")
    p.add_argument("--mean", action="store_true", help="write per-set means (and a .std.csv)")
    p.add_argument("--out", default="spectra.csv")
    p.add_argument("--svg")

    p = add("train-wet", cmd_train_wet, "train the wet-soil model on dry/wet pairs")
    p.add_argument("--corpus", required=True)
    p.add_argument("--test-size", type=float, default=370 / 1670)
    p.add_argument("--out", required=True)

    p = add("wet", cmd_wet, "predict wet spectra from dry spectra and moisture")
    p.add_argument("--dry", required=True)
    p.add_argument("--smc", type=float, required=True, help="gravimetric soil moisture, percent")
    p.add_argument("--model")
    p.add_argument("--out", required=True)

    p = add("integrate", cmd_integrate, "band-integrate spectra against camera and source tables")
    p.add_argument("--spectra", required=True)
    p.add_argument("--camera", help="camera response CSV (default: flat R,G,B)")
    p.add_argument("--source", help="source spectrum CSV (default: flat)")
    p.add_argument("--normalize-by-cs", action="store_true",
                   help="divide by the integral of C*S instead of S")
    p.add_argument("--prosail-dir", help="also export each spectrum as a PROSAIL soil file here")
    p.add_argument("--out", required=True)

    p = add("render", cmd_render, "render a labeled synthetic soil image")
    p.add_argument("--scene", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--sogm", help="SOGM checkpoint for patches given by properties")
    p.add_argument("--wet", help="wet-soil checkpoint for patches with smc_g")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--normalize-by-cs", action="store_true")

    p = add("eval", cmd_eval, "evaluate a model with a protocol")
    p.add_argument("target", choices=("pad", "sogm", "wet"))
    p.add_argument("--corpus", required=True)
    p.add_argument("--model")
    p.add_argument("--padder")
    p.add_argument("--protocol")
    p.add_argument("--out", required=True)
    return parser


def _version():
    from . import __version__

    return f"soilgen {__version__}"


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        overrides = _parse_set(args.set)
        run = overrides.setdefault("run", {})
        for key in ("seed", "threads", "log_level"):
            if getattr(args, key) is not None:
                run[key] = getattr(args, key)
        cfg = cfgmod.load_config(args.config, overrides)
        logging.basicConfig(level=str(cfg["run"]["log_level"]).upper(), format="%(levelname)s %(name)s: %(message)s")
        import torch

        torch.set_num_threads(cfgmod.resolve_threads(cfg))
        out, extra = args.func(args, cfg)
        cfgmod.write_run_manifest(out, cfg, " ".join(["soilgen", *(argv if argv is not None else sys.argv[1:])]),
                                  extra)
    except (CLIError, cfgmod.ConfigError, CheckpointError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"soilgen {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
