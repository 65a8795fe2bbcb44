"""``fedehr`` command line.

Exit codes: 0 success, 1 usage or input error, 2 policy denial or failed
verification, 3 numeric divergence during training.
"""

from __future__ import annotations

import argparse
import io
import json
import os
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dataset as D
from .ehr_audit import (
    AccessRequest,
    LogChain,
    Policy,
    RuleChange,
    default_policy,
    record_access,
    record_consent,
    redact_view,
    replay_audit,
    verify_jsonl,
)
from .errors import FedEHRError, NonFinite, Unauthorized
from .fedlearn import FederationConfig, run_rounds, write_metrics_csv
from .models import (
    ModelParams,
    evaluate,
    fit_linear_ols,
    mean_predictor,
    mlp_init,
    train_sgd,
)
from .privacy import (
    DPConfig,
    detect_watermark,
    dp_perturb_column,
    embed_watermark,
    observed_range,
    pseudonymize_column,
    read_registry,
    write_registry,
)

EXIT_OK, EXIT_INPUT, EXIT_DENIED, EXIT_DIVERGED = 0, 1, 2, 3

# stream ids for child seeds; never reorder
STREAM_SSN, STREAM_SPLIT, STREAM_PARTITION, STREAM_MODEL, STREAM_DP = range(5)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 means "denied" here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def child_seed(root: int, stream: int) -> int:
    """Independent seed for ``stream`` derived from the invocation's root seed."""
    ss = np.random.SeedSequence(root, spawn_key=(stream,))
    return int(ss.generate_state(1, np.uint64)[0])


def atomic_write(path: str | os.PathLike, data: str | bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _hex_key(text: str, what: str = "key") -> bytes:
    try:
        key = bytes.fromhex(text)
    except ValueError:
        raise UsageError(f"{what} must be hex") from None
    if len(key) != 32 or text != text.lower():
        raise UsageError(f"{what} must be 64 lowercase hex characters")
    return key


def _read_dataset(path) -> D.Dataset:
    return D.read_csv(Path(path).read_bytes())


def _need_out(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    return Path(args.out)


def _timestamp(args) -> int:
    if args.timestamp is not None:
        return args.timestamp
    env = os.environ.get("SOURCE_DATE_EPOCH")
    return int(env) if env else int(time.time())


def _load_config(args) -> dict:
    if not args.config:
        return {}
    try:
        return json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {args.config}: {exc}") from None


def _root_seed(args, config: dict) -> int:
    if args.seed is not None:
        return args.seed
    return int(config.get("seed", 0))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    if args.bundled:
        records = D.load_insurance()
    elif args.source:
        records = D.parse_csv(Path(args.source).read_bytes(), require_ssn=False)
    else:
        raise UsageError("give a CSV path or --bundled")
    if not records:
        raise UsageError("input has no data rows")
    if records[0].ssn is None:
        seed = child_seed(_root_seed(args, {}), STREAM_SSN)
        records = D.merge_ssn(records, D.synthesize_ssns(seed, len(records)))
    ds = D.Dataset.from_records(records)
    atomic_write(_need_out(args), D.dataset_to_csv(ds))
    print(f"rows={ds.n_rows} columns={len(ds.columns)}")
    return EXIT_OK


def cmd_synth(args) -> int:
    ssns = D.synthesize_ssns(child_seed(_root_seed(args, {}), STREAM_SSN), args.n)
    text = "".join(s + "\n" for s in ssns)
    if args.out:
        atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _metrics_table(rows: list[tuple[str, object]]) -> str:
    buf = io.StringIO()
    buf.write("model,r_squared,rmse,mae,mse\n")
    for name, m in rows:
        buf.write(f"{name},{m.r_squared:.9g},{m.rmse:.9g},{m.mae:.9g},{m.mse:.9g}\n")
    return buf.getvalue()


def cmd_train(args) -> int:
    config = _load_config(args)
    root = _root_seed(args, config)
    out = _need_out(args)
    ds = _read_dataset(args.data)

    if args.mode == "central" and args.model == "ols":
        features = None if args.features == "all" else D.CATEGORICAL_FEATURES
        design = D.prepare_regression(ds, features)
        train, test = D.train_test_split(design, args.test_fraction, child_seed(root, STREAM_SPLIT))
        Xtr, ytr, names = train.xy()
        Xte, yte, _ = test.xy()
        model = fit_linear_ols(Xtr, ytr)
        fitted = evaluate(model, Xte, yte)
        baseline = evaluate(mean_predictor(ytr, Xtr.shape[1]), Xte, yte)
        atomic_write(out / "metrics.csv", _metrics_table([("linear", fitted), ("mean", baseline)]))
        atomic_write(out / "model.json", model.to_json() + "\n")
        atomic_write(out / "features.json", json.dumps(names) + "\n")
        print(f"linear: r2={fitted.r_squared:.4f} rmse={fitted.rmse:.2f}")
        print(f"mean:   r2={baseline.r_squared:.4f} rmse={baseline.rmse:.2f}")
        return EXIT_OK

    cfg = FederationConfig.from_dict({k: v for k, v in config.items() if k != "seed"})
    cfg = replace(cfg, seed=child_seed(root, STREAM_MODEL))
    prepared = D.prepare_federated(ds)
    atomic_write(out / "stats.json", json.dumps(prepared.stats.to_dict(), sort_keys=True) + "\n")

    if args.mode == "central":
        X, y, _ = prepared.xy()
        model = mlp_init(X.shape[1], *cfg.hidden, seed=cfg.seed)
        model, history = train_sgd(model, X, y, cfg.train, cfg.rounds_max)
        buf = io.StringIO()
        buf.write("epoch,mae,mse\n")
        for i, m in enumerate(history, start=1):
            buf.write(f"{i},{m.mae:.9g},{m.mse:.9g}\n")
        atomic_write(out / "metrics.csv", buf.getvalue())
        atomic_write(out / "model.json", model.to_json() + "\n")
        print(f"epochs={len(history)} final_mae={history[-1].mae:.6f}")
        return EXIT_OK

    shards = D.partition(prepared, cfg.num_clients, child_seed(root, STREAM_PARTITION))
    state = run_rounds(cfg, shards)
    buf = io.StringIO()
    write_metrics_csv(state.history, buf)
    atomic_write(out / "metrics.csv", buf.getvalue())
    atomic_write(out / "model.json", state.global_params.to_json() + "\n")
    atomic_write(out / "config.json", json.dumps(cfg.to_dict(), sort_keys=True) + "\n")
    last = state.history[-1]
    print(f"rounds={state.round_index} initial_mae={state.baseline.loss_mae:.6f} final_mae={last.loss_mae:.6f}")
    return EXIT_OK


def cmd_dp(args) -> int:
    ds = _read_dataset(args.data)
    ds.kind(args.column)
    sensitivity = args.sensitivity if args.sensitivity is not None else observed_range(ds, args.column)
    cfg = DPConfig(
        epsilon=args.epsilon,
        sensitivity=sensitivity,
        mechanism=args.mechanism,
        delta=args.delta,
        seed=child_seed(_root_seed(args, {}), STREAM_DP),
    )
    noisy = dp_perturb_column(ds, args.column, cfg)
    atomic_write(_need_out(args), D.dataset_to_csv(noisy))
    shift = np.abs(noisy.column(args.column) - ds.column(args.column).astype(float))
    print(f"mean_abs_perturbation={float(np.mean(shift)):.6f} scale={cfg.scale:.6f}")
    return EXIT_OK


def cmd_pseudonymize(args) -> int:
    key = _hex_key(args.key) if args.key else None
    ds = _read_dataset(args.data)
    atomic_write(_need_out(args), D.dataset_to_csv(pseudonymize_column(ds, key)))
    print(f"rows={ds.n_rows} mode={'hmac-sha256' if key else 'sha256'}")
    return EXIT_OK


def cmd_watermark(args) -> int:
    key = _hex_key(args.key)
    ds = _read_dataset(args.data)
    registry_path = Path(args.registry)
    if args.action == "embed":
        if not args.recipient:
            raise UsageError("--recipient is required for embed")
        marked, tag = embed_watermark(ds, args.recipient, key)
        existing = []
        if registry_path.exists():
            with registry_path.open() as fh:
                existing = [t for t in read_registry(fh) if t.recipient_id != args.recipient]
        buf = io.StringIO()
        write_registry([*existing, tag], buf)
        atomic_write(_need_out(args), D.dataset_to_csv(marked))
        atomic_write(registry_path, buf.getvalue())
        print(f"recipient={args.recipient} payload={tag.payload:08x}")
        return EXIT_OK
    with registry_path.open() as fh:
        registry = read_registry(fh)
    found = detect_watermark(ds, registry, key)
    if found is None:
        print("no match")
        return EXIT_DENIED
    print(found)
    return EXIT_OK


def _load_chain(path: Path) -> LogChain:
    return LogChain.from_jsonl(path.read_bytes())


def cmd_access(args) -> int:
    policy_path, chain_path = Path(args.policy), Path(args.chain)
    policy = Policy.from_json(policy_path.read_text())
    chain = _load_chain(chain_path)
    ds = _read_dataset(args.data)
    try:
        row = ds.row(int(args.record))
    except (ValueError, IndexError):
        raise UsageError(f"no record {args.record!r}") from None
    fields = tuple(f.strip().lower() for f in args.fields.split(",") if f.strip())
    req = AccessRequest(args.actor, args.role, str(args.record), fields, args.purpose, _timestamp(args))
    decision, _ = record_access(chain, policy, req)
    atomic_write(chain_path, chain.to_jsonl())
    if not decision.allowed:
        print(json.dumps({"decision": "deny", "denied_fields": list(decision.denied_fields)}))
        return EXIT_DENIED
    view = redact_view(row, args.role, policy, str(args.record))
    view = {f: view[f] for f in fields}
    print(json.dumps({"decision": "allow", "obligations": list(decision.obligations), "view": view}))
    return EXIT_OK


def cmd_consent(args) -> int:
    policy_path, chain_path = Path(args.policy), Path(args.chain)
    policy = Policy.from_json(policy_path.read_text())
    chain = _load_chain(chain_path)
    change = RuleChange(args.role, args.field.lower(), args.decision, tuple(args.obligation or ()), args.record)
    try:
        policy = record_consent(chain, policy, args.actor_role, args.actor, change, _timestamp(args))
    except Unauthorized as exc:
        print(f"unauthorized: {exc}", file=sys.stderr)
        return EXIT_DENIED
    atomic_write(chain_path, chain.to_jsonl())
    atomic_write(policy_path, policy.to_json())
    print(f"policy updated; chain length {len(chain)}")
    return EXIT_OK


def cmd_policy_init(args) -> int:
    atomic_write(_need_out(args), default_policy().to_json())
    if args.chain and not Path(args.chain).exists():
        atomic_write(args.chain, "")
    return EXIT_OK


def cmd_audit_verify(args) -> int:
    data = Path(args.chain).read_bytes()
    n, violation = verify_jsonl(data)
    if violation is not None:
        print(str(violation))
        return EXIT_DENIED
    if args.policy:
        problems = replay_audit(LogChain.from_jsonl(data), Policy.from_json(Path(args.policy).read_text()))
        if problems:
            for p in problems:
                print(str(p))
            return EXIT_DENIED
    print(f"ok {n} entries")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="root seed (default 0)")
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", help="output file or directory")

    parser = _Parser(prog="fedehr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="parse CSV, add synthetic SSNs if missing")
    p.add_argument("source", nargs="?")
    p.add_argument("--bundled", action="store_true", help="use the packaged insurance CSV")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic SSNs")
    p.add_argument("--n", type=int, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="centralized or federated training")
    p.add_argument("--mode", choices=("central", "federated"), default="federated")
    p.add_argument("--model", choices=("ols", "sgd"), default="ols", help="central mode only")
    p.add_argument("--features", choices=("all", "categorical"), default="all")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("dp", parents=[common], help="add DP noise to one column")
    p.add_argument("--data", required=True)
    p.add_argument("--column", default="charges")
    p.add_argument("--epsilon", type=float, default=1.0)
    p.add_argument("--sensitivity", type=float, default=None, help="default: observed range")
    p.add_argument("--mechanism", choices=("laplace", "gaussian"), default="laplace")
    p.add_argument("--delta", type=float, default=None)
    p.set_defaults(func=cmd_dp)

    p = sub.add_parser("pseudonymize", parents=[common], help="replace SSNs by SHA-256 pseudonyms")
    p.add_argument("--data", required=True)
    p.add_argument("--key", help="64 hex chars; enables HMAC mode")
    p.set_defaults(func=cmd_pseudonymize)

    p = sub.add_parser("watermark", parents=[common], help="embed or detect recipient watermarks")
    p.add_argument("action", choices=("embed", "detect"))
    p.add_argument("--data", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--registry", required=True)
    p.add_argument("--recipient")
    p.set_defaults(func=cmd_watermark)

    p = sub.add_parser("policy-init", parents=[common], help="write the default policy file")
    p.add_argument("--chain", help="also create an empty chain file here if none exists")
    p.set_defaults(func=cmd_policy_init)

    p = sub.add_parser("access", parents=[common], help="request fields of one record")
    p.add_argument("--data", required=True)
    p.add_argument("--record", required=True, help="row index")
    p.add_argument("--role", required=True)
    p.add_argument("--actor", default="anonymous")
    p.add_argument("--fields", required=True, help="comma-separated")
    p.add_argument("--purpose", default="")
    p.add_argument("--policy", required=True)
    p.add_argument("--chain", required=True)
    p.add_argument("--timestamp", type=int, default=None)
    p.set_defaults(func=cmd_access)

    p = sub.add_parser("consent", parents=[common], help="change a policy rule and log it")
    p.add_argument("--actor-role", required=True)
    p.add_argument("--actor", required=True)
    p.add_argument("--role", required=True, help="role the rule applies to")
    p.add_argument("--field", required=True)
    p.add_argument("--decision", choices=("allow", "deny"), required=True)
    p.add_argument("--obligation", action="append")
    p.add_argument("--record", default=None)
    p.add_argument("--policy", required=True)
    p.add_argument("--chain", required=True)
    p.add_argument("--timestamp", type=int, default=None)
    p.set_defaults(func=cmd_consent)

    p = sub.add_parser("audit-verify", parents=[common], help="verify a hash-chained log")
    p.add_argument("chain")
    p.add_argument("--policy", help="initial policy; enables decision replay")
    p.set_defaults(func=cmd_audit_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NonFinite as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FedEHRError, UsageError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
