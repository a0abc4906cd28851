"""Command-line front end: ``python -m policyscope <command> ...``.

Exit codes: 0 success, 2 usage (bad flags, unknown env/policy, bad config),
3 runtime failure. Diagnostics go to stderr; results go to files (``eval``
prints its metrics as JSON on stdout).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import envs, inference, selection, store

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
SEED_ENV_VAR = "POLICYSCOPE_SEED"

log = logging.getLogger("policyscope")


class UsageError(Exception):
    pass


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}") from None


def _env(env_id: str) -> envs.Environment:
    try:
        return envs.make_env(env_id)
    except envs.UnknownEnvError as err:
        raise UsageError(str(err)) from None


def cmd_fit(args) -> None:
    env = _env(args.env)
    try:
        env.check_policy(args.policy)
        config = store.load_config(args.config) if args.config else inference.DiscoverConfig()
        overrides = {"seed": _seed(args)}
        if args.threads is not None:
            overrides["threads"] = args.threads
        config = inference.DiscoverConfig.from_dict({**config.to_dict(), **overrides})
    except (envs.UnknownPolicyError, KeyError, ValueError, json.JSONDecodeError) as err:
        raise UsageError(str(err)) from None

    sink = open(args.diagnostics, "w") if args.diagnostics else sys.stderr
    try:
        def on_round(record):
            sink.write(json.dumps(record, sort_keys=True) + "\n")
            sink.flush()

        cert = inference.run_discover(env, args.policy, config, on_round=on_round)
    finally:
        if sink is not sys.stderr:
            sink.close()
    store.save_certificate(cert, args.out)
    if not cert.complete:
        log.warning("run stopped early; certificate flagged incomplete")


def cmd_sample(args) -> None:
    cert = store.load_certificate(args.cert)
    x = cert.sample(args.n, np.random.default_rng(_seed(args)))
    store.write_samples_csv(x, cert.spec, args.out)


def cmd_eval(args) -> None:
    cert = store.load_certificate(args.cert)
    env = _env(cert.env_id)
    metrics = inference.evaluate_posterior(cert, env, args.n, np.random.default_rng(_seed(args)))
    print(json.dumps(metrics, sort_keys=True))


def cmd_select(args) -> None:
    env = _env(args.env)
    certs = {}
    for path in args.certs.split(","):
        cert = store.load_certificate(path)
        if cert.policy_id in certs:
            raise UsageError(f"two certificates for policy {cert.policy_id!r}")
        certs[cert.policy_id] = cert
    try:
        for task in certs:
            env.check_policy(task)
    except envs.UnknownPolicyError as err:
        raise UsageError(str(err)) from None
    result = selection.run_selection_experiment(certs, env, args.beliefs, np.random.default_rng(_seed(args)))
    result.to_csv(args.out)


def cmd_pairgrid(args) -> None:
    cert = store.load_certificate(args.cert)
    x = cert.sample(args.n, np.random.default_rng(_seed(args)))
    store.write_pairgrid_csv(store.pairgrid(x, cert.spec, args.bins), args.out)


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="policyscope", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a posterior certificate for one policy")
    p.add_argument("--env", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--diagnostics", help="line-JSON round diagnostics (default: stderr)")
    p.add_argument("--threads", type=_positive)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("sample", help="draw posterior samples in simulator units")
    p.add_argument("--cert", required=True)
    p.add_argument("-n", type=_positive, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score posterior samples with the environment oracle")
    p.add_argument("--cert", required=True)
    p.add_argument("-n", type=_positive, required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("select", help="task-selection experiment over random beliefs")
    p.add_argument("--certs", required=True, help="comma-separated certificate files")
    p.add_argument("--env", required=True)
    p.add_argument("--beliefs", type=_positive, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("pairgrid", help="1-D and pairwise histogram grids of posterior samples")
    p.add_argument("--cert", required=True)
    p.add_argument("-n", type=_positive, required=True)
    p.add_argument("--bins", type=_positive, default=20)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_pairgrid)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as err:
        parser.print_usage(sys.stderr)
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (store.CertificateFormatError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as err:  # noqa: BLE001 - CLI boundary
        log.debug("failure", exc_info=True)
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
