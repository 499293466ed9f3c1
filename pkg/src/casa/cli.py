"""Command-line front end: ``casa {analyze,cluster,transfer,ablate}``.

Settings resolve as CLI flags > manifest JSON > built-in defaults, and the
resolved settings are echoed into every report. Progress goes to stderr;
machine-readable output goes to files (and error JSON to stdout).
"""
from __future__ import annotations

import argparse
import fnmatch
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .ablation import AblationSpec, overactivate_dominant_blocks, partial_distilled
from .arbitration import SCHEMA, CasaConfig, transfer_model
from .errors import IoError
from .routing import (
    cluster_metrics,
    cluster_rotation_graph,
    cluster_similarity_graph,
    interference_maps,
    project_routing,
)
from .spectral import spectral_rigidity, svd, topk_energy
from .tensor_store import (
    LoraAdapter,
    RawTensor,
    WeightMap,
    load_adapter,
    load_checkpoint,
    lora_delta,
    resolve_layer_key,
    save_adapter,
    save_checkpoint,
)

log = logging.getLogger("casa")

ERROR_SCHEMA = "casa-error/1"
_CONFIG_FLAGS = {
    "energy_fraction": "energy_fraction",
    "tau": "tau",
    "epsilon": "eps",
    "q_dom": "q_dom",
    "q_act": "q_act",
    "out_rank": "out_rank",
    "residual": "residual_policy",
    "region_policy": "region_policy",
    "act_population": "act_population",
}


@dataclass
class RunManifest:
    source_path: str | None = None
    target_path: str | None = None
    lora_path: str | None = None
    output_dir: str | None = None
    config: CasaConfig = field(default_factory=CasaConfig)
    options: dict = field(default_factory=dict)

    def require(self, name: str) -> str:
        value = getattr(self, f"{name}_path" if name != "output" else "output_dir")
        if not value:
            raise KeyError(name)
        return value


# ---------------------------------------------------------------------------
# resolution


def _read_manifest(path: str) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoError(f"{path}: {exc.strerror or exc}") from None
    if not isinstance(data, dict):
        raise ValueError(f"{path}: manifest must be a JSON object")
    base = Path(path).resolve().parent
    for key in ("source", "target", "lora", "output"):
        if data.get(key) and not os.path.isabs(data[key]):
            data[key] = str(base / data[key])
    return data


def resolve_manifest(args: argparse.Namespace) -> RunManifest:
    data = _read_manifest(args.manifest) if args.manifest else {}
    man_cfg = dict(data.get("config", {}))
    cfg_kwargs = {f.name: man_cfg[f.name] for f in fields(CasaConfig) if f.name in man_cfg}
    for flag, name in _CONFIG_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg_kwargs[name] = value
    options = {k: v for k, v in data.items() if k not in ("source", "target", "lora", "output", "config")}
    for name in ("mode", "q_sweep", "seed", "noise_mean", "noise_var", "block_fraction", "window", "include", "exclude"):
        value = getattr(args, name, None)
        if value is not None:
            options[name] = value
    return RunManifest(
        source_path=args.source or data.get("source"),
        target_path=args.target or data.get("target"),
        lora_path=args.lora or data.get("lora"),
        output_dir=args.out or data.get("output"),
        config=CasaConfig(**cfg_kwargs),
        options=options,
    )


def resolve_jobs(flag: int | None) -> int:
    if flag is not None:
        return max(1, flag)
    env = os.environ.get("CASA_JOBS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def key_filter(include: list[str] | None, exclude: list[str] | None):
    def accept(key: str) -> bool:
        if include and not any(fnmatch.fnmatchcase(key, p) for p in include):
            return False
        return not (exclude and any(fnmatch.fnmatchcase(key, p) for p in exclude))
    return accept


def _map(fn, items, jobs):
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _with_layer(key, fn, *args):
    try:
        return fn(*args)
    except Exception as exc:
        exc.args = (f"layer {key}: {exc.args[0] if exc.args else exc}",) + exc.args[1:]
        raise


def _out_dir(man: RunManifest) -> Path:
    out = Path(man.require("output"))
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"{out}: {exc.strerror or exc}") from None
    return out


def _write_json(path: Path, payload: dict) -> None:
    try:
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"{path}: {exc.strerror or exc}") from None


def _report(command: str, man: RunManifest, extra_config: dict, layers: list, **rest) -> dict:
    return {
        "schema": SCHEMA,
        "version": __version__,
        "command": command,
        "config": dict(man.config.to_dict(), **extra_config),
        "inputs": {"source": man.source_path, "target": man.target_path, "lora": man.lora_path},
        "layers": layers,
        **rest,
    }


def _tensor_file(matrices: dict[str, np.ndarray], vectors: dict[str, np.ndarray] | None = None) -> WeightMap:
    extras = {k: RawTensor("F64", v.shape, np.asarray(v, dtype="<f8")) for k, v in (vectors or {}).items()}
    return WeightMap(entries=dict(matrices), dtype="F64", extras=extras)


def _lora_by_key(adapter: LoraAdapter | None, keys) -> dict:
    if adapter is None:
        return {}
    out = {}
    for base, pair in adapter.pairs.items():
        key = resolve_layer_key(base, keys)
        if key is not None:
            out[key] = pair
    return out


def _parse_window(text: str) -> tuple[str, int, int]:
    try:
        name, start, stop = text.split(":")
        start, stop = int(start), int(stop)
    except ValueError:
        raise argparse.ArgumentTypeError(f"window must look like name:start:stop, got {text!r}") from None
    if not 0 <= start < stop:
        raise argparse.ArgumentTypeError(f"window {text!r} is empty")
    return name, start, stop


# ---------------------------------------------------------------------------
# commands


def cmd_analyze(man: RunManifest, jobs: int) -> dict:
    source = load_checkpoint(man.require("source"))
    target = load_checkpoint(man.target_path) if man.target_path else None
    adapter = load_adapter(man.lora_path) if man.lora_path else None
    out = _out_dir(man)
    accept = key_filter(man.options.get("include"), man.options.get("exclude"))
    windows = [tuple(w) for w in man.options.get("window") or []]
    keys = [k for k in source.keys() if accept(k)]
    loras = _lora_by_key(adapter, source.entries)

    def one(key):
        W = source[key]
        s = svd(W)
        row = {"key": key, "shape": list(W.shape), "m": s.m, "k": topk_energy(s.S, man.config.energy_fraction)}
        spectra = {f"{key}/source": s.S}
        sims = {}
        posts = {}
        if target is not None and key in target:
            t = svd(target[key])
            row["rho2_target"] = spectral_rigidity(s.S, t.S)
            spectra[f"{key}/target"] = t.S
            posts["target"] = t.U
        if key in loras:
            lo = svd(W + lora_delta(loras[key]))
            row["rho2_lora"] = spectral_rigidity(s.S, lo.S)
            spectra[f"{key}/lora"] = lo.S
            posts["lora"] = lo.U
        for against, U_post in posts.items():
            for name, a, b in windows:
                a, b = max(a, 0), min(b, s.m)
                if a < b:
                    sims[f"{key}/{against}/{name}"] = np.abs(s.U[:, a:b].T @ U_post[:, a:b])
        log.info("analyzed %s", key)
        return row, spectra, sims

    results = _map(lambda k: _with_layer(k, one, k), keys, jobs)
    layers, spectra, sims = [], {}, {}
    for row, sp, si in results:
        layers.append(row)
        spectra.update(sp)
        sims.update(si)
    save_checkpoint(_tensor_file({}, spectra), out / "spectra.safetensors")
    save_checkpoint(_tensor_file(sims), out / "similarity.safetensors")
    rhos = [r["rho2_target"] for r in layers if "rho2_target" in r]
    report = _report(
        "analyze", man, {"windows": [list(w) for w in windows]}, layers,
        summary={"max_rho2_target": max(rhos) if rhos else None, "n_layers": len(layers)},
    )
    _write_json(out / "analyze_report.json", report)
    return report


def _metrics_dict(metrics) -> dict:
    return {
        "send_density": metrics.send_density.tolist(),
        "recv_density": metrics.recv_density.tolist(),
        "coherence_send": metrics.coherence_send.tolist(),
        "coherence_recv": metrics.coherence_recv.tolist(),
        "cv_send": metrics.cv_send.tolist(),
        "cv_recv": metrics.cv_recv.tolist(),
        "layer_mean": metrics.layer_summary(),
    }


def cmd_cluster(man: RunManifest, jobs: int) -> dict:
    cfg = man.config
    mode = man.options.get("mode") or "rotation-graph"
    if mode not in ("rotation-graph", "analysis-graph"):
        raise ValueError(f"unknown clustering mode {mode!r}")
    threshold = float(man.options.get("similarity_threshold", 0.2))
    source = load_checkpoint(man.require("source"))
    target = load_checkpoint(man.target_path) if man.target_path else None
    adapter = load_adapter(man.lora_path) if man.lora_path else None
    if mode == "rotation-graph" and adapter is None:
        raise KeyError("lora")
    if mode == "analysis-graph" and target is None and adapter is None:
        raise KeyError("target")
    out = _out_dir(man)
    accept = key_filter(man.options.get("include"), man.options.get("exclude"))
    loras = _lora_by_key(adapter, source.entries)
    keys = [k for k in source.keys() if accept(k) and (adapter is None or k in loras)]

    def one(key):
        W = source[key]
        s = svd(W)
        k = topk_energy(s.S, cfg.energy_fraction)
        C_lora = project_routing(s, lora_delta(loras[key]), "lora", key).C if key in loras else None
        C_fft = project_routing(s, target[key] - W, "fft", key).C if target is not None and key in target else None
        if mode == "rotation-graph":
            clusters = cluster_rotation_graph(C_lora, s.S, k, cfg.tau, cfg.eps)
        else:
            post = target[key] if C_fft is not None else W + lora_delta(loras[key])
            clusters = cluster_similarity_graph(s.U, svd(post).U, k, threshold)
        row = {"key": key, "m": s.m, "k": k, "M": clusters.M, "method": clusters.method,
               "cluster_sizes": clusters.sizes, "clusters": clusters.as_lists(), "metrics": {}}
        tensors = {}
        for name, C in (("lora", C_lora), ("fft", C_fft)):
            if C is None:
                continue
            met = cluster_metrics(C, clusters)
            row["metrics"][name] = _metrics_dict(met)
            tensors[f"{key}/C_{name}"] = C
            tensors[f"{key}/rms_{name}"] = met.rms_block
        if C_lora is not None and C_fft is not None:
            overlap, alignment = interference_maps(C_lora, C_fft, clusters, cfg.eps)
            row["overlap"] = overlap.tolist()
            row["alignment"] = alignment.tolist()
            tensors[f"{key}/overlap"] = overlap
            tensors[f"{key}/alignment"] = alignment
        log.info("clustered %s: k=%d M=%d", key, k, clusters.M)
        return row, tensors

    results = _map(lambda k: _with_layer(k, one, k), keys, jobs)
    tensors = {}
    for _, t in results:
        tensors.update(t)
    save_checkpoint(_tensor_file(tensors), out / "cluster_tensors.safetensors")
    report = _report("cluster", man, {"mode": mode, "similarity_threshold": threshold}, [r for r, _ in results])
    _write_json(out / "cluster_report.json", report)
    return report


def cmd_transfer(man: RunManifest, jobs: int) -> dict:
    source_path, target_path, lora_path = man.require("source"), man.require("target"), man.require("lora")
    source = load_checkpoint(source_path)
    target = load_checkpoint(target_path)
    adapter = load_adapter(lora_path)
    out = _out_dir(man)
    accept = key_filter(man.options.get("include"), man.options.get("exclude"))
    chosen = {b: p for b, p in adapter.pairs.items() if accept(resolve_layer_key(b, source.entries) or b)}
    skipped = [b for b in adapter.pairs if b not in chosen]
    new, model_report = transfer_model(source, target, replace(adapter, pairs=chosen), man.config, jobs=jobs)
    pairs = {b: new.pairs.get(b, p) for b, p in adapter.pairs.items()}
    save_adapter(replace(adapter, pairs=pairs), out / "adapter.safetensors")
    report = _report(
        "transfer", man, {}, [layer.to_dict() for layer in model_report.layers],
        passthrough=skipped,
    )
    _write_json(out / "transfer_report.json", report)
    return report


def cmd_ablate(man: RunManifest, jobs: int, which: str) -> dict:
    source = load_checkpoint(man.require("source"))
    target = load_checkpoint(man.require("target"))
    out = _out_dir(man)
    opts = man.options
    accept = key_filter(opts.get("include"), opts.get("exclude"))
    spec = AblationSpec(
        q=tuple(opts.get("q_sweep") or AblationSpec.q),
        noise_mean=float(opts.get("noise_mean", AblationSpec.noise_mean)),
        noise_var=float(opts.get("noise_var", AblationSpec.noise_var)),
        block_fraction=float(opts.get("block_fraction", AblationSpec.block_fraction)),
        rng_seed=int(opts.get("seed", AblationSpec.rng_seed)),
    )
    extra = {"ablation": which, "q_sweep": list(spec.q), "noise_mean": spec.noise_mean,
             "noise_var": spec.noise_var, "block_fraction": spec.block_fraction, "seed": spec.rng_seed}
    runs = []
    if which == "partial":
        for q in spec.q:
            rows: list = []
            result = partial_distilled(source, target, man.config, q, jobs=jobs, include=accept, report=rows)
            name = f"partial_q{q:.2f}.safetensors"
            save_checkpoint(result, out / name)
            removed = sum(r["removed_energy"] for r in rows)
            total = sum(r["total_energy"] for r in rows)
            for r in rows:
                r["removed_fraction"] = r["removed_energy"] / r["total_energy"] if r["total_energy"] else 0.0
            runs.append({"q": q, "file": name, "removed_energy": removed, "total_energy": total,
                         "removed_fraction": removed / total if total else 0.0, "layers": rows})
            log.info("partial q=%.2f removed %.4g of drift routing energy", q, runs[-1]["removed_fraction"])
    elif which == "overactivate":
        result = overactivate_dominant_blocks(source, target, man.config, spec, jobs=jobs, include=accept)
        name = f"overactivate_seed{spec.rng_seed}.safetensors"
        save_checkpoint(result, out / name)
        runs.append({"file": name})
    else:
        raise ValueError(f"unknown ablation {which!r}")
    report = _report("ablate", man, extra, [], runs=runs)
    _write_json(out / "ablate_report.json", report)
    return report


# ---------------------------------------------------------------------------
# argument parsing


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.replace(",", " ").split()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", help="JSON manifest with source/target/lora/output paths and optional config")
    common.add_argument("--source")
    common.add_argument("--target")
    common.add_argument("--lora")
    common.add_argument("--out", help="output directory")
    common.add_argument("--energy-fraction", type=float)
    common.add_argument("--tau", type=float)
    common.add_argument("--epsilon", type=float)
    common.add_argument("--q-dom", type=float)
    common.add_argument("--q-act", type=float)
    common.add_argument("--out-rank", type=int)
    common.add_argument("--residual", choices=["passthrough", "discard"])
    common.add_argument("--region-policy", choices=["square", "strips"])
    common.add_argument("--act-population", choices=["positive", "all"])
    common.add_argument("--jobs", type=int, help="worker threads (default: $CASA_JOBS or CPU count)")
    common.add_argument("--include", action="append", help="glob of layer keys to process (repeatable)")
    common.add_argument("--exclude", action="append", help="glob of layer keys to skip (repeatable)")
    common.add_argument("--log-level", default="INFO")

    parser = argparse.ArgumentParser(prog="casa", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", parents=[common], help="spectral rigidity and subspace similarity")
    p.add_argument("--window", action="append", type=_parse_window, help="similarity window name:start:stop (repeatable)")

    p = sub.add_parser("cluster", parents=[common], help="clusters, routing metrics and interference maps")
    p.add_argument("--mode", choices=["rotation-graph", "analysis-graph"])

    sub.add_parser("transfer", parents=[common], help="transfer a LoRA onto the fine-tuned model")

    p = sub.add_parser("ablate", parents=[common], help="partial-distilled or over-activated checkpoints")
    p.add_argument("ablation", choices=["partial", "overactivate"])
    p.add_argument("--q-sweep", type=_floats, help="comma-separated dominance quantiles")
    p.add_argument("--seed", type=int)
    p.add_argument("--noise-mean", type=float)
    p.add_argument("--noise-var", type=float)
    p.add_argument("--block-fraction", type=float)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        man = resolve_manifest(args)
        jobs = resolve_jobs(args.jobs)
        if args.command == "analyze":
            cmd_analyze(man, jobs)
        elif args.command == "cluster":
            cmd_cluster(man, jobs)
        elif args.command == "transfer":
            cmd_transfer(man, jobs)
        else:
            cmd_ablate(man, jobs, args.ablation)
    except (Exception, KeyboardInterrupt) as exc:  # noqa: BLE001 - every failure becomes error JSON
        message = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        print(json.dumps({"schema": ERROR_SCHEMA, "error": {"kind": type(exc).__name__, "message": str(message)}}))
        log.debug("command failed", exc_info=True)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
