"""Command-line front end: issue/verify tokens, aggregate logs, run simulations.

Exit codes are part of the interface so shell pipelines can branch on
outcomes: 0 success, 1 usage error, 2 token verification failure, 3
rate-limit rejection, 4 I/O or data error.

Shared deployment parameters live in a JSON config file; all relative
paths inside it resolve against the config file's own directory::

    {
      "policies": [
        {"name": "default",
         "policy_id": "000102030405060708090a0b0c0d0e0f",
         "k": 2, "epsilon": "log(3)",
         "epoch_seconds": 86400, "rate_limit": 3,
         "sketch_bits": 16, "tau": 0.02}
      ],
      "trust_store": ["issuer.pub"],
      "event_log": "events.log"
    }
"""
from __future__ import annotations

import argparse
import json
import random
import socket
import sys
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from . import admission, aggregate, dp, experiments, heavyhitter, ratelimit, token

__all__ = ["main", "entry", "load_config", "Config", "ConfigError"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFY = 2
EXIT_RATELIMIT = 3
EXIT_IO = 4


class UsageError(Exception):
    """Bad command line or bad parameter values; exits with code 1."""


class ConfigError(Exception):
    """Unreadable or inconsistent config file; exits with code 4."""


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; this interface reserves 2 for
    # verification failures, so route usage problems through UsageError.
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


@dataclass(frozen=True)
class Config:
    policies_by_name: dict[str, dp.Policy]
    policies_by_id: dict[bytes, dp.Policy]
    trust_store: token.TrustStore
    event_log: Path | None


def load_config(path: str) -> Config:
    cfg_path = Path(path)
    try:
        raw = json.loads(cfg_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    base = cfg_path.parent

    by_name: dict[str, dp.Policy] = {}
    by_id: dict[bytes, dp.Policy] = {}
    for entry in raw.get("policies", []):
        try:
            name = entry["name"]
            kwargs = {
                "policy_id": bytes.fromhex(entry["policy_id"]),
                "k": int(entry["k"]),
                "exp_epsilon": dp.parse_epsilon(entry["epsilon"]),
            }
            for key in ("epoch_seconds", "rate_limit", "sketch_bits"):
                if key in entry:
                    kwargs[key] = int(entry[key])
            if "tau" in entry:
                kwargs["tau"] = float(entry["tau"])
            policy = dp.Policy(**kwargs)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad policy entry in {path}: {exc}")
        if name in by_name:
            raise ConfigError(f"duplicate policy name {name!r}")
        if policy.policy_id in by_id:
            raise ConfigError(f"duplicate policy_id {policy.policy_id.hex()}")
        by_name[name] = policy
        by_id[policy.policy_id] = policy

    public_keys = []
    for rel in raw.get("trust_store", []):
        key_path = base / rel
        try:
            public_keys.append(token.load_public_key(key_path))
        except OSError as exc:
            raise ConfigError(f"cannot read trusted key {key_path}: {exc}")
        except ValueError as exc:
            raise ConfigError(f"bad public key {key_path}: {exc}")

    log_rel = raw.get("event_log")
    event_log = base / log_rel if log_rel else None
    return Config(by_name, by_id, token.TrustStore(public_keys), event_log)


def _policy_for(config: Config, name: str) -> dp.Policy:
    try:
        return config.policies_by_name[name]
    except KeyError:
        raise UsageError(
            f"unknown policy {name!r}; config defines {sorted(config.policies_by_name)}"
        )


def _read_token_text(args) -> str:
    if args.token is not None:
        return args.token.strip()
    text = sys.stdin.read().strip()
    if not text:
        raise UsageError("no token given: pass --token or pipe one on stdin")
    return text


def _now(args) -> float:
    return args.now if args.now is not None else time.time()


def _parse_when(text: str) -> float:
    """A --since/--until bound: ISO 8601 (naive means UTC) or a raw timestamp."""
    try:
        return float(text)
    except ValueError:
        pass
    try:
        ts = datetime.fromisoformat(text)
    except ValueError:
        raise UsageError(f"cannot parse time {text!r} (ISO 8601 or unix seconds)")
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.timestamp()


def _read_logs(paths) -> list[aggregate.LogEvent]:
    events = []
    for path in paths:
        events.extend(aggregate.read_events(path))
    return events


def _log_paths(args, config: Config) -> list:
    if args.log:
        return list(args.log)
    if config.event_log is None:
        raise UsageError("no --log given and the config sets no event_log")
    return [config.event_log]


# --- subcommands --------------------------------------------------------


def cmd_keygen(args) -> int:
    key = token.generate_signing_key(args.scheme)
    token.save_private_key(key, f"{args.out}.key")
    token.save_public_key(key.public_key(), f"{args.out}.pub")
    print(token.key_id(key.public_key()).hex())
    return EXIT_OK


def cmd_issue(args) -> int:
    config = load_config(args.config)
    policy = _policy_for(config, args.policy)
    key = token.load_private_key(args.key)
    rng = random.Random(args.seed) if args.seed is not None else None
    try:
        signed, _ = token.issue(args.status, policy, key, int(_now(args)), rng)
    except dp.DomainError as exc:
        raise UsageError(str(exc))
    print(token.encode_text(signed))
    return EXIT_OK


def cmd_verify(args) -> int:
    config = load_config(args.config)
    text = _read_token_text(args)
    now = _now(args)
    try:
        signed = token.decode_text(text)
        payload, tid = token.verify(
            signed.encode(), config.trust_store, config.policies_by_id, now
        )
        if args.policy is not None:
            expected = _policy_for(config, args.policy)
            if payload.policy_id != expected.policy_id:
                raise token.UnknownPolicyError(
                    f"token policy {payload.policy_id.hex()} is not {args.policy!r}"
                )
    except token.TokenError as exc:
        print(f"reject {exc.code}: {exc}", file=sys.stderr)
        return EXIT_VERIFY

    policy = config.policies_by_id[payload.policy_id]
    if args.record:
        if config.event_log is None:
            raise UsageError("--record needs an event_log entry in the config")
        epoch = ratelimit.epoch_of(now, policy.epoch_seconds)
        used = 0
        if config.event_log.exists():
            counts = ratelimit.usage_counts(
                aggregate.read_events(config.event_log), policy.epoch_seconds, epoch
            )
            used = counts.get(epoch, {}).get(tid.hash_hex(), 0)
        if used >= policy.rate_limit:
            print(
                f"reject rate-limit: TID used {used} times this epoch"
                f" (limit {policy.rate_limit})",
                file=sys.stderr,
            )
            return EXIT_RATELIMIT
        aggregate.append_event(config.event_log, now, payload.token_value, tid)
    print(f"{payload.token_value},{tid.hash_hex()}")
    return EXIT_OK


def cmd_aggregate(args) -> int:
    config = load_config(args.config)
    policy = _policy_for(config, args.policy)
    events = _read_logs(_log_paths(args, config))
    since = _parse_when(args.since) if args.since else None
    until = _parse_when(args.until) if args.until else None
    tally = aggregate.tally_from_events(events, policy, since, until)
    try:
        est, e_x, risk_sum = aggregate.aggregate(tally, policy)
    except dp.EmptyAggregateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    header = ["n"] + [f"fhat_{i}" for i in range(policy.k)] + ["expected_risk", "risk_sum"]
    row = [str(est.n)] + [repr(f) for f in est.per_level] + [repr(e_x), repr(risk_sum)]
    print(",".join(header))
    print(",".join(row))
    return EXIT_OK


def cmd_audit_ledger(args) -> int:
    config = load_config(args.config)
    policy = _policy_for(config, args.policy)
    events = _read_logs(_log_paths(args, config))
    threshold = args.threshold if args.threshold is not None else policy.rate_limit
    per_epoch = ratelimit.usage_counts(events, policy.epoch_seconds)
    print("epoch_start,tid_hash,count")
    for epoch in sorted(per_epoch):
        start = datetime.fromtimestamp(
            epoch * policy.epoch_seconds, tz=timezone.utc
        ).isoformat()
        for tid_hash, count in sorted(per_epoch[epoch].items()):
            if count > threshold:
                print(f"{start},{tid_hash},{count}")
    return EXIT_OK


def cmd_simulate_shop(args) -> int:
    policy = dp.Policy(
        policy_id=bytes(16), k=args.k, exp_epsilon=dp.parse_epsilon(args.epsilon)
    )
    try:
        trace = admission.simulate(
            policy,
            R=args.limit,
            duration=args.duration,
            rng=random.Random(args.seed),
            arrival_rate=args.arrival_rate,
            mean_dwell=args.mean_dwell,
            batch_size=args.batch,
        )
    except ValueError as exc:
        raise UsageError(str(exc))
    print("time,event,token_value,r,decision")
    for row in trace:
        print(f"{row.time!r},{row.event},{row.token_value},{row.r},{row.decision}")
    return EXIT_OK


def _serve_stdio(server: heavyhitter.HeavyHitterServer) -> None:
    for line in sys.stdin:
        if not line.strip():
            continue
        print(heavyhitter.handle_line(server, line), flush=True)


def _serve_tcp(server: heavyhitter.HeavyHitterServer, listen: str, max_connections) -> None:
    host, _, port_text = listen.rpartition(":")
    host = host or "127.0.0.1"
    with socket.create_server((host, int(port_text))) as srv:
        print(f"listening on {host}:{srv.getsockname()[1]}", flush=True)
        served = 0
        while max_connections is None or served < max_connections:
            conn, _ = srv.accept()
            with conn:
                rf = conn.makefile("r", encoding="utf-8")
                wf = conn.makefile("w", encoding="utf-8")
                for line in rf:
                    wf.write(heavyhitter.handle_line(server, line) + "\n")
                    wf.flush()
            served += 1


def cmd_hh_server(args) -> int:
    state = heavyhitter.load_sketch(args.load) if args.load else None
    rng = random.Random(args.seed) if args.seed is not None else None
    try:
        server = heavyhitter.HeavyHitterServer(
            args.sketch_bits, args.tau, rng=rng, state=state
        )
    except ValueError as exc:
        raise UsageError(str(exc))
    if args.listen:
        _serve_tcp(server, args.listen, args.max_connections)
    else:
        _serve_stdio(server)
    if args.save:
        heavyhitter.save_sketch(server.state, args.save)
    return EXIT_OK


def _exchange(rf, wf, request: str) -> str:
    wf.write(request + "\n")
    wf.flush()
    reply = rf.readline()
    if not reply:
        raise ConfigError("sketch server closed the connection")
    return reply.rstrip("\n")


def cmd_hh_report(args) -> int:
    if args.tid_hex is not None:
        tid = token.Tid(bytes.fromhex(args.tid_hex))
    else:
        tid = token.decode_text(_read_token_text(args)).tid
    host, _, port_text = args.connect.rpartition(":")
    with socket.create_connection((host or "127.0.0.1", int(port_text))) as conn:
        rf = conn.makefile("r", encoding="utf-8")
        wf = conn.makefile("w", encoding="utf-8")
        reply = _exchange(rf, wf, "CHALLENGE?")
        try:
            nonce_hex, r_hex = reply.split(",")
            challenge = heavyhitter.Challenge(bytes.fromhex(nonce_hex), int(r_hex, 16))
        except ValueError:
            raise ConfigError(f"bad challenge line from server: {reply!r}")
        report = heavyhitter.client_report(tid, challenge, args.sketch_bits)
        reply = _exchange(rf, wf, f"REPORT {nonce_hex},{report.b}")
        if reply != "OK":
            raise ConfigError(f"server rejected report: {reply}")
        if args.check:
            reply = _exchange(rf, wf, "PUBLISHED?")
            published = {int(x, 16) for x in reply.split(",") if x}
            if heavyhitter.check_published(tid, published, args.sketch_bits):
                print("flagged")
                return EXIT_VERIFY
            print("clear")
    return EXIT_OK


def cmd_experiment(args) -> int:
    n_values = tuple(range(1, args.max_n + 1))
    try:
        curves = experiments.run_preset(
            args.preset, args.seed, n_values=n_values, trials=args.trials
        )
    except ValueError as exc:
        raise UsageError(str(exc))
    if args.out == "-":
        experiments.write_csv(curves, sys.stdout)
    else:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            experiments.write_csv(curves, fh)
    if len({c.config.exp_epsilon for c in curves}) > 1:
        print(experiments.epsilon_direction_note(curves), file=sys.stderr)
    if args.plot:
        experiments.plot_curves(curves, args.plot)
    return EXIT_OK


# --- parser -------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(
        prog="htok", description="health-token issuance, verification, and analysis"
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("keygen", help="generate an issuer signing key pair")
    p.add_argument("--scheme", choices=sorted(token.SCHEMES), default="p256")
    p.add_argument("--out", required=True, help="path prefix for .key/.pub files")
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("issue", help="randomize a true status and sign a token")
    p.add_argument("--config", required=True)
    p.add_argument("--policy", required=True, help="policy name from the config")
    p.add_argument("--key", required=True, help="issuer private key (PEM)")
    p.add_argument("--status", required=True, type=int, help="true risk level")
    p.add_argument("--now", type=float, help="issuance time (unix seconds)")
    p.add_argument("--seed", type=int, help="seed the randomizer (testing only)")
    p.set_defaults(func=cmd_issue)

    p = sub.add_parser("verify", help="check a token; optionally record the use")
    p.add_argument("--config", required=True)
    p.add_argument("--token", help="token text (default: read stdin)")
    p.add_argument("--policy", help="also require the token to use this policy")
    p.add_argument("--now", type=float)
    p.add_argument(
        "--record",
        action="store_true",
        help="rate-limit the TID and append to the config's event log",
    )
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("aggregate", help="debias logged token values into estimates")
    p.add_argument("--config", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--log", action="append", help="event log (repeatable)")
    p.add_argument("--since", help="ISO 8601 or unix seconds")
    p.add_argument("--until", help="ISO 8601 or unix seconds")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("audit-ledger", help="list per-epoch TID uses over a threshold")
    p.add_argument("--config", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--log", action="append")
    p.add_argument(
        "--threshold", type=int, help="report counts above this (default: rate limit)"
    )
    p.set_defaults(func=cmd_audit_ledger)

    p = sub.add_parser("simulate-shop", help="run the admission simulator, print a trace")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--epsilon", default="log(3)")
    p.add_argument("--limit", type=float, required=True, help="risk cap R (inf allowed)")
    p.add_argument("--duration", type=float, required=True)
    p.add_argument(
        "--arrival-rate", "--lambda", dest="arrival_rate", type=float, required=True
    )
    p.add_argument("--mean-dwell", "--mu", dest="mean_dwell", type=float, required=True)
    p.add_argument("--batch", type=int, help="batch size (omit for single mode)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate_shop)

    p = sub.add_parser("hh-server", help="run the over-use sketch server")
    p.add_argument("--sketch-bits", type=int, default=16)
    p.add_argument("--tau", type=float, default=0.02)
    p.add_argument("--listen", help="HOST:PORT (default: line protocol on stdio)")
    p.add_argument("--load", help="sketch snapshot to resume from")
    p.add_argument("--save", help="write a sketch snapshot on exit")
    p.add_argument("--seed", type=int, help="seed challenge randomness (testing only)")
    p.add_argument(
        "--max-connections",
        type=int,
        help="stop after serving this many connections (testing/automation)",
    )
    p.set_defaults(func=cmd_hh_server)

    p = sub.add_parser("hh-report", help="answer one sketch challenge for a token")
    p.add_argument("--connect", required=True, help="HOST:PORT of the sketch server")
    p.add_argument("--sketch-bits", type=int, default=16)
    p.add_argument("--token", help="token text (default: read stdin)")
    p.add_argument("--tid-hex", help="report a raw TID instead of a token")
    p.add_argument(
        "--check",
        action="store_true",
        help="also test the TID against the published list (flagged exits 2)",
    )
    p.set_defaults(func=cmd_hh_report)

    p = sub.add_parser("experiment", help="run an accuracy experiment preset")
    p.add_argument("--preset", required=True, choices=sorted(experiments.PRESETS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=experiments.DEFAULT_TRIALS)
    p.add_argument("--max-n", type=int, default=max(experiments.DEFAULT_N_VALUES))
    p.add_argument("--out", default="-", help="CSV path, or - for stdout")
    p.add_argument("--plot", help="also write a PNG of the curves")
    p.set_defaults(func=cmd_experiment)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except token.TokenError as exc:
        print(f"reject {exc.code}: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (dp.DomainError, ValueError) as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
