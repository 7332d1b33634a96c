"""Command-line experiment runner.

Subcommands: gen-data, search, run, bench-he, overhead, codebook-dump.
Every command writes ``manifest.json`` next to its outputs. Options may also
come from ``--spec FILE`` (``key = value`` lines, keys spelled like the
long flags with dashes or underscores); explicit flags win.

Exit codes: 0 success, 1 invalid input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__, paillier
from .distributions import FederationDataset, InfeasibleTarget, generate_federation
from .fl_train import SyntheticTask, TrainConfig, last_rounds_accuracy, run_experiment, trace_to_csv, train_reference
from .protocol import overhead_report_merge, run_parameter_search_phase, run_registration_round, run_selection_round
from .registry import RegistryScheme
from .selection import STRATEGIES, ClampWarning, SelectionConfig, make_selector, multi_time_select

OUT_ENV = "FEDSELECT_OUT"


class ValidationError(ValueError):
    pass


def _floats(text: str) -> list[float]:
    return [float(x) for x in str(text).replace(",", " ").split()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in str(text).replace(",", " ").split()]


@dataclass
class ExperimentSpec:
    C: int = 10
    N: int = 1000
    n_vc: int = 128
    rho: float = 10.0
    emd: float = 1.5
    seed: int = 0
    classes_per_client: int = 2
    dataset: str | None = None
    G: list[int] | None = None
    sigma: list[float] = field(default_factory=lambda: [0.7, 0.1])
    grid: str | None = None
    strategies: list[str] = field(default_factory=lambda: list(STRATEGIES))
    K: int = 20
    H: list[int] = field(default_factory=lambda: [1])
    repetitions: int = 100
    batch_size: int = 8
    local_epochs: int = 1
    lr: float = 0.05
    rounds: int = 200
    optimizer: str = "sgd"
    seeds: list[int] = field(default_factory=lambda: [0])
    noise: float = 0.45
    dim: int = 20
    key_bits: int = 2048
    insecure: bool = False
    crypto: str = "sized"
    selection_rounds: int = 1
    workers: int = 1
    out: str = "."

    def validate(self) -> None:
        if self.C < 2:
            raise ValidationError("--c must be at least 2")
        if self.N < 1 or self.K < 1:
            raise ValidationError("--n and --k must be positive")
        if self.K > self.N:
            raise ValidationError(f"--k {self.K} exceeds --n {self.N}")
        if self.rho < 1:
            raise ValidationError("--rho must be >= 1")
        if not 0 <= self.emd < 2:
            raise ValidationError("--emd must lie in [0, 2)")
        if any(h < 1 for h in self.H):
            raise ValidationError("--h values must be >= 1")
        if self.G is not None and self.G[-1] != self.C:
            raise ValidationError(f"--g must end with C={self.C}")
        unknown = set(self.strategies) - set(STRATEGIES)
        if unknown:
            raise ValidationError(f"unknown strategies {sorted(unknown)}")
        if self.crypto not in ("full", "sized"):
            raise ValidationError("--crypto must be full or sized")
        if self.key_bits < paillier.MIN_SECURE_BITS and not self.insecure:
            raise ValidationError(f"--key-bits {self.key_bits} < {paillier.MIN_SECURE_BITS} requires --insecure")
        if self.dim < self.C:
            raise ValidationError("--dim must be >= --c")
        try:
            self.scheme()
            TrainConfig(self.batch_size, self.local_epochs, self.n_vc, self.lr, self.rounds, self.optimizer)
        except ValueError as e:
            raise ValidationError(str(e)) from None

    def scheme(self) -> RegistryScheme:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return RegistryScheme(C=self.C, G=tuple(self.reference_set()), sigma=tuple(self.sigma))

    def reference_set(self) -> list[int]:
        if self.G is not None:
            return self.G
        return [1, 2, self.C] if self.C > 2 else [1, 2]

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.batch_size, self.local_epochs, self.n_vc, self.lr, self.rounds, self.optimizer)

    def parsed_grid(self):
        if self.grid is None:
            return None
        pts = []
        for chunk in self.grid.split(";"):
            if chunk.strip():
                pts.append(tuple(_floats(chunk)))
        return pts


_LIST_PARSERS = {"G": _ints, "sigma": _floats, "strategies": lambda s: str(s).replace(",", " ").split(),
                 "H": _ints, "seeds": _ints}


def _coerce(name: str, value):
    f = {f.name: f for f in fields(ExperimentSpec)}[name]
    if name in _LIST_PARSERS:
        return _LIST_PARSERS[name](value) if isinstance(value, str) else list(value)
    if value is None:
        return None
    t = f.type if isinstance(f.type, str) else f.type.__name__
    if t.startswith("int"):
        return int(value)
    if t.startswith("float"):
        return float(value)
    if t.startswith("bool"):
        return value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes", "on")
    return value


def read_spec_file(path: str) -> dict:
    out = {}
    names = {f.name.lower(): f.name for f in fields(ExperimentSpec)}
    names.update({"c": "C", "n": "N", "k": "K", "h": "H", "g": "G"})
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ValidationError(f"{path}:{lineno}: expected key = value")
        key = key.strip().replace("-", "_").lower()
        if key not in names:
            raise ValidationError(f"{path}:{lineno}: unknown key {key!r}")
        out[names[key]] = val.strip()
    return out


def build_spec(args: argparse.Namespace) -> ExperimentSpec:
    values = {}
    if getattr(args, "spec", None):
        values.update(read_spec_file(args.spec))
    for f in fields(ExperimentSpec):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    if "out" not in values:
        values["out"] = os.environ.get(OUT_ENV, ".")
    try:
        spec = ExperimentSpec(**{k: _coerce(k, v) for k, v in values.items()})
    except (TypeError, ValueError) as e:
        raise ValidationError(str(e)) from None
    spec.validate()
    return spec


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _outdir(spec: ExperimentSpec) -> Path:
    p = Path(spec.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_manifest(out: Path, command: str, spec: ExperimentSpec, **extra) -> None:
    doc = {"command": command, "version": __version__, "spec": asdict(spec)}
    doc.update(extra)
    (out / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _dataset(spec: ExperimentSpec, seed: int | None = None) -> FederationDataset:
    if spec.dataset:
        text = Path(spec.dataset).read_text()
        ds = FederationDataset.from_json(text) if text.lstrip().startswith("{") else FederationDataset.from_text(text)
        if ds.num_classes != spec.C:
            raise ValidationError(f"dataset has {ds.num_classes} classes but --c is {spec.C}")
        if spec.K > ds.num_clients:
            raise ValidationError(f"--k {spec.K} exceeds the dataset's {ds.num_clients} clients")
        return ds
    try:
        return generate_federation(spec.C, spec.N, spec.n_vc, spec.rho, spec.emd,
                                   spec.seed if seed is None else seed, spec.classes_per_client)
    except InfeasibleTarget as e:
        raise ValidationError(str(e)) from None


def _map(fn, items, workers: int):
    items = list(items)
    if workers <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_data(spec: ExperimentSpec) -> dict:
    ds = _dataset(spec)
    out = _outdir(spec)
    (out / "dataset.txt").write_text(ds.to_text())
    (out / "dataset.json").write_text(ds.to_json() + "\n")
    _write_manifest(out, "gen-data", spec, outputs=["dataset.txt", "dataset.json"])
    return ds.header()


def cmd_codebook_dump(spec: ExperimentSpec) -> list[str]:
    lines = [f"{slot}\t{i}\t{','.join(map(str, cat))}" for slot, i, cat in spec.scheme().codebook()]
    out = _outdir(spec)
    (out / "codebook.tsv").write_text("slot\tsize\tcategory\n" + "\n".join(lines) + "\n")
    _write_manifest(out, "codebook-dump", spec, outputs=["codebook.tsv"])
    return lines


def cmd_search(spec: ExperimentSpec) -> dict:
    ds = _dataset(spec)
    H = spec.H[0]
    best, report, points, transcript = run_parameter_search_phase(
        ds, spec.scheme(), spec.parsed_grid(), H, spec.K, spec.seed, spec.key_bits, spec.crypto)
    result = {"best_sigma": list(best), "best_score": min(p.score for p in points), "H": H, "K": spec.K,
              "points": [p.to_record() for p in points]}
    out = _outdir(spec)
    (out / "search.json").write_text(json.dumps(result, indent=1) + "\n")
    (out / "overhead.json").write_text(report.to_json() + "\n")
    _write_manifest(out, "search", spec, outputs=["search.json", "overhead.json"])
    return result


def _emd_job(args):
    spec, strategy, H = args
    ds = _dataset(spec)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ClampWarning)
        sel = make_selector(strategy, ds.counts, spec.K, spec.scheme())
    vals = [multi_time_select(sel, ds.counts, H, spec.seed, r).emd_star for r in range(spec.repetitions)]
    return {"strategy": strategy, "H": H, "mean_emd_star": float(np.mean(vals)), "std_emd_star": float(np.std(vals))}


def emd_table(spec: ExperimentSpec) -> list[dict]:
    jobs = [(spec, s, H) for s in spec.strategies for H in (spec.H if s == "dubhe" else [1])]
    return _map(_emd_job, jobs, spec.workers)


def _train_job(args):
    spec, strategy, seed = args
    ds = _dataset(spec, seed)
    task = SyntheticTask(C=spec.C, d=spec.dim, noise=spec.noise, seed=seed)
    tc = spec.train_config()
    ref = train_reference(task, spec.K * ds.n_vc, tc, seed=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ClampWarning)
        return run_experiment(ds, task, SelectionConfig(spec.K, spec.H[0], strategy, seed), tc,
                              scheme=spec.scheme(), reference=ref)


def cmd_run(spec: ExperimentSpec, emd_only: bool = False) -> dict:
    out = _outdir(spec)
    if emd_only:
        rows = emd_table(spec)
        lines = ["strategy,H,mean_emd_star,std_emd_star"]
        lines += [f"{r['strategy']},{r['H']},{r['mean_emd_star']:.6f},{r['std_emd_star']:.6f}" for r in rows]
        (out / "emd_table.csv").write_text("\n".join(lines) + "\n")
        _write_manifest(out, "run --emd-only", spec, outputs=["emd_table.csv"])
        return {"emd_table": rows}
    jobs = [(spec, s, seed) for seed in spec.seeds for s in spec.strategies]
    traces = _map(_train_job, jobs, spec.workers)
    summary = {}
    for (_, s, seed), tr in zip(jobs, traces):
        summary.setdefault(s, {})[str(seed)] = last_rounds_accuracy(tr)
    result = {"last50_accuracy": summary,
              "mean_last50_accuracy": {s: float(np.mean(list(v.values()))) for s, v in summary.items()}}
    (out / "traces.csv").write_text(trace_to_csv(r for tr in traces for r in tr))
    (out / "summary.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    _write_manifest(out, "run", spec, outputs=["traces.csv", "summary.json"])
    return result


def cmd_bench_he(key_bits: list[int], lengths: list[int], trials: int, seed: int, out: Path) -> list[dict]:
    import random
    rows = []
    for bits in key_bits:
        rng = random.Random(seed)
        pk, sk = paillier.keygen(bits, rng, insecure=True)
        for length in lengths:
            enc_t = dec_t = 0.0
            for _ in range(trials):
                vals = [rng.randrange(0, 1000) for _ in range(length)]
                t0 = time.perf_counter()
                vec = paillier.encrypt_vector(pk, vals, rng)
                t1 = time.perf_counter()
                if paillier.decrypt_vector(sk, vec) != vals:
                    raise RuntimeError("decryption mismatch")
                t2 = time.perf_counter()
                enc_t += t1 - t0
                dec_t += t2 - t1
            rows.append({
                "key_bits": bits, "length": length,
                "encrypt_s": enc_t / trials, "decrypt_s": dec_t / trials,
                "wire_bytes": paillier.ciphertext_serialized_size(pk, length),
                "raw_ciphertext_bytes": length * pk.ciphertext_bytes,
                "python_object_bytes": paillier.python_object_size(pk, length),
            })
    for bits in key_bits:
        sub = [r for r in rows if r["key_bits"] == bits]
        if len(sub) >= 2:
            x = np.array([r["length"] for r in sub], float)
            y = np.array([r["wire_bytes"] for r in sub], float)
            r2 = float(np.corrcoef(x, y)[0, 1] ** 2)
            for r in sub:
                r["size_linear_r2"] = r2
    out.mkdir(parents=True, exist_ok=True)
    cols = list(rows[0].keys()) if rows else []
    lines = [",".join(cols)] + [",".join(str(r.get(c, "")) for c in cols) for r in rows]
    (out / "bench_he.csv").write_text("\n".join(lines) + "\n")
    (out / "manifest.json").write_text(json.dumps({"command": "bench-he", "version": __version__, "key_bits": key_bits,
                                                   "lengths": lengths, "trials": trials, "seed": seed}, indent=1) + "\n")
    return rows


def cmd_overhead(spec: ExperimentSpec) -> dict:
    ds = _dataset(spec)
    reg = run_registration_round(ds, spec.scheme(), spec.key_bits, spec.seed, crypto=spec.crypto)
    reports = [reg.report]
    transcript = list(reg.transcript)
    uploads = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ClampWarning)
        for t in range(spec.selection_rounds):
            cfg = SelectionConfig(spec.K, spec.H[0], "dubhe", spec.seed)
            _, rep, tr = run_selection_round(reg, ds, cfg, round_index=t)
            reports.append(rep)
            transcript.extend(tr)
            uploads.append(rep.messages["DistributionUpload"])
    total = overhead_report_merge(reports)
    result = {
        "registration": reg.report.to_dict(),
        "selection_rounds": [r.to_dict() for r in reports[1:]],
        "total": total.to_dict(),
        "registry_length": spec.scheme().length,
        "registration_uploads": reg.report.messages["RegistryUpload"],
        "selection_uploads_per_round": uploads,
        "HK": spec.H[0] * spec.K,
    }
    out = _outdir(spec)
    (out / "overhead.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    (out / "transcript.tsv").write_text("round\tphase\tkind\tsender\treceiver\tbytes\n"
                                        + "\n".join(m.line() for m in transcript) + "\n")
    _write_manifest(out, "overhead", spec, outputs=["overhead.json", "transcript.tsv"])
    return result


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, *groups: str) -> None:
    p.add_argument("--spec", help="key = value file with defaults")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or .)")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    if "data" in groups:
        p.add_argument("--c", dest="C", type=int)
        p.add_argument("--n", dest="N", type=int)
        p.add_argument("--n-vc", dest="n_vc", type=int)
        p.add_argument("--rho", type=float)
        p.add_argument("--emd", type=float)
        p.add_argument("--classes-per-client", dest="classes_per_client", type=int, choices=(1, 2))
        p.add_argument("--dataset", help="read clients from a gen-data file instead of generating")
    if "scheme" in groups:
        p.add_argument("--g", dest="G", help="reference set ending in C (default 1,2,C)")
        p.add_argument("--sigma", help="thresholds for G without the last element, e.g. 0.7,0.1")
    if "select" in groups:
        p.add_argument("--k", dest="K", type=int)
        p.add_argument("--h", dest="H", help="tentative tries; a list for run --emd-only")
    if "crypto" in groups:
        p.add_argument("--key-bits", dest="key_bits", type=int)
        p.add_argument("--insecure", action="store_const", const=True, default=None)
        p.add_argument("--crypto", choices=("full", "sized"))


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedselect", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic federation")
    _common(p, "data")

    p = sub.add_parser("codebook-dump", help="list registry slots")
    _common(p, "scheme")
    p.add_argument("--c", dest="C", type=int)

    p = sub.add_parser("search", help="threshold parameter search")
    _common(p, "data", "scheme", "select", "crypto")
    p.add_argument("--grid", help="semicolon-separated threshold tuples, e.g. '0.7,0.1;0.6,0.2'")

    p = sub.add_parser("run", help="compare strategies")
    _common(p, "data", "scheme", "select")
    p.add_argument("--strategies", help="comma list of random, greedy, dubhe")
    p.add_argument("--emd-only", action="store_true", help="no training: EMD* vs H table")
    p.add_argument("--repetitions", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--seeds", help="comma list of paired seeds")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--local-epochs", dest="local_epochs", type=int)
    p.add_argument("--optimizer", choices=("sgd", "adam"))
    p.add_argument("--noise", type=float)
    p.add_argument("--dim", type=int)

    p = sub.add_parser("bench-he", help="Paillier timing and size table")
    p.add_argument("--key-bits", default="2048", help="comma list")
    p.add_argument("--lengths", default="10,53,56,100")
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = sub.add_parser("overhead", help="message and byte accounting for registration + selection")
    _common(p, "data", "scheme", "select", "crypto")
    p.add_argument("--selection-rounds", dest="selection_rounds", type=int)
    return ap


def main(argv=None) -> int:
    ap = make_parser()
    args = ap.parse_args(argv)
    try:
        if args.command == "bench-he":
            out = Path(args.out or os.environ.get(OUT_ENV, "."))
            bits, lengths = _ints(args.key_bits), _ints(args.lengths)
            if any(b < 64 or b % 2 for b in bits) or any(n < 1 for n in lengths) or args.trials < 1:
                raise ValidationError("key bits must be even and >= 64; lengths and trials positive")
            result = cmd_bench_he(bits, lengths, args.trials, args.seed, out)
        else:
            spec = build_spec(args)
            if args.command == "gen-data":
                result = cmd_gen_data(spec)
            elif args.command == "codebook-dump":
                result = cmd_codebook_dump(spec)
                print("\n".join(result))
                return 0
            elif args.command == "search":
                result = cmd_search(spec)
            elif args.command == "run":
                result = cmd_run(spec, emd_only=args.emd_only)
            else:
                result = cmd_overhead(spec)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    print(json.dumps(result, indent=1, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
