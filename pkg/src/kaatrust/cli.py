"""Command-line front end: ``kaatrust <command> ...``.

Exit codes: 0 success, 2 bad input or config, 3 policy denial,
4 cryptographic verification failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import random
import secrets
import sys
import time
from pathlib import Path
from statistics import median

from . import analysis, simulation
from .che import (
    Node,
    PairingRefused,
    Phase,
    ProofInvalid,
    ProtocolError,
    Reason,
    force_pairing,
    mutual_trust_exchange,
    negotiate,
    open_session,
    run_service_interaction,
)
from .history import BlacklistedPeer, InvalidSignature
from .identity import MacMismatch, Signature, imprint, station_setup
from .pairing import DecodeError, ParameterMismatch
from .policy import Pattern, PolicyConfig, PolicyError, preset
from .reputation import UnverifiedEvent
from .storage import (
    NodeStateFile,
    StateLocked,
    file_lock,
    read_keystore,
    read_station,
    write_keystore,
    write_station,
)
from .wire import WireError

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DENIED = 3
EXIT_CRYPTO = 4

DEMO_EPOCH = 1_700_000_000


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _seed(args) -> int:
    if args.seed is None:
        args.seed = secrets.randbits(32)
    print(f"seed={args.seed}")
    return args.seed


def _load_policy(args) -> PolicyConfig:
    cfg = preset(args.preset) if args.preset else PolicyConfig()
    if args.policy:
        try:
            cfg = PolicyConfig.from_text(Path(args.policy).read_text(), cfg)
        except OSError as exc:
            raise CliError(f"cannot read policy file: {exc}") from None
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise CliError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    return cfg.with_overrides(overrides) if overrides else cfg


def _load_node(path: Path, seed: int, clock) -> tuple[NodeStateFile, Node]:
    try:
        state = NodeStateFile.load(path)
    except FileNotFoundError:
        raise CliError(f"no such node file: {path}") from None
    germ = read_keystore(state.keystore_path(path), state.public)
    return state, state.to_node(germ, seed=seed, clock=clock)


def _save_node(path: Path, state: NodeStateFile, node: Node) -> None:
    dataclasses.replace(state, history=node.history, reputation=node.reputation).save(path)


# -- imprint -------------------------------------------------------------------

def cmd_imprint(args) -> int:
    seed = _seed(args)
    station_path = Path(args.station)
    if args.new_station:
        if station_path.exists():
            raise CliError(f"station file {station_path} already exists")
        station = station_setup(args.new_station, seed=seed)
        write_station(station_path, station)
        print(f"created station {station.station_id!r} in {station_path}")
    else:
        try:
            station = read_station(station_path)
        except FileNotFoundError:
            raise CliError(f"no such station file: {station_path}") from None
    policy = _load_policy(args)
    germ = imprint(station, args.id)
    out = Path(args.out)
    keystore = Path(args.keystore) if args.keystore else out.with_name(out.name + ".keys")
    with file_lock(out):
        write_keystore(keystore, germ)
        node = Node.create(germ, policy)
        NodeStateFile.from_node(node, keystore.name if keystore.parent == out.parent else str(keystore.resolve())).save(out)
    print(f"imprinted {germ.id!r} by station {station.station_id!r}")
    print(f"P_pub={station.p_pub.to_bytes().hex()}")
    print(f"node file {out}, keystore {keystore}")
    return EXIT_OK


# -- inspect -------------------------------------------------------------------

def cmd_inspect(args) -> int:
    path = Path(args.node)
    state = NodeStateFile.load(path)
    pub = state.public
    print(f"id: {pub.id}")
    print(f"station: {pub.station_id}")
    print(f"P_pub: {pub.p_pub.to_bytes().hex()}")
    print(f"keystore: {state.keystore_ref}{' (exportable)' if state.exportable else ''}")
    print(f"history size: {len(state.history)}/{state.history.capacity}")
    for element in state.history:
        print(f"  {element.message.decode('utf-8', 'replace')}  from {element.peer_id}  "
              f"sp={int(element.flags.sp)} tp={int(element.flags.tp)} rp={int(element.flags.rp)}")
    for peer, (count, last) in sorted(state.history.blacklist.items()):
        flag = " BLACKLISTED" if state.history.is_blacklisted(peer) else ""
        print(f"strikes: {peer} x{count} last={last}{flag}")
    for subject in sorted(state.reputation.records):
        rec = state.reputation.records[subject]
        d, ind = rec.direct, rec.indirect
        print(f"reputation {subject}: score={state.reputation.score(subject):.2f} meetings={d.meetings} "
              f"tp={d.trustor_proofs} rp={d.reciprocal_proofs} refused={d.services_refused} "
              f"vouchers(tp/rp/both)={ind.vouchers_tp}/{ind.vouchers_rp}/{ind.vouchers_both}")
    print("policy:")
    for line in state.policy.to_text().splitlines():
        print(f"  {line}")
    return EXIT_OK


# -- demo ----------------------------------------------------------------------

def _print_transcript(sessions, start: int) -> int:
    lines = sessions[0].transcript
    for line in lines[start:]:
        print(f"  {line}")
    return len(lines)


def _tamper_latest(node: Node, voucher_id: str) -> None:
    history = node.history.elements
    for idx in range(len(history) - 1, -1, -1):
        element = history[idx]
        if element.peer_id == voucher_id:
            sig = element.signature
            bad = Signature(sig.commitment, sig.response + sig.response.params.generator)
            history[idx] = dataclasses.replace(element, signature=bad)
            return
    raise CliError(f"{node.id} holds nothing from {voucher_id}")


def cmd_demo(args) -> int:
    seed = _seed(args)
    rng = random.Random(seed)
    clock = iter(range(DEMO_EPOCH, DEMO_EPOCH + 10_000, 60))
    now = lambda: next(clock)  # noqa: E731
    station = station_setup("demo-station", seed=rng.getrandbits(64))
    policy = PolicyConfig(p_receiver=args.p, p_provider=args.p)
    alice, bob, charlie = (Node.create(imprint(station, name), policy, seed=rng.getrandbits(64))
                           for name in ("alice", "bob", "charlie"))

    for x, y in ((alice, bob), (bob, charlie)):
        print(f"== {x.id} meets {y.id} (first contact, paired by hand)")
        x.pairing_confirmed = y.pairing_confirmed = True
        sessions = open_session(x, y, seed=rng.getrandbits(64))
        force_pairing(*sessions, now=now())
        _print_transcript(sessions, 0)

    if args.tamper:
        print("== tampering with charlie's proof from bob")
        _tamper_latest(charlie, bob.id)

    print(f"== alice meets charlie (p={args.p})")
    a, c = open_session(alice, charlie, seed=rng.getrandbits(64))
    t = now()
    decisions = negotiate(a, c, now=t)
    shown = _print_transcript((a, c), 0)
    code = EXIT_OK
    if a.reason is Reason.PROOF_INVALID:
        print("result: ProofInvalid")
        code = EXIT_CRYPTO
    elif not all(d.allowed for d in decisions):
        reason = a.reason.value if a.reason else decisions[0].reason
        print(f"result: Rejected({reason})")
        code = EXIT_DENIED
    else:
        mutual_trust_exchange(a, c, now=t)
        _print_transcript((a, c), shown)
        ok = (a.phase is Phase.TRUSTED and c.phase is Phase.TRUSTED
              and a.common_set == c.common_set == {bob.id})
        print(f"result: alice {a.phase.value}, charlie {c.phase.value}, "
              f"verified common {sorted(a.common_set)}")
        code = EXIT_OK if ok else EXIT_CRYPTO

    print("== final histories")
    for node in (alice, bob, charlie):
        print(f"{node.id} ({len(node.history)}):")
        for element in node.history:
            status = "ok" if element.verify() else "BAD SIGNATURE"
            print(f"  {element.message.decode()}  signed by {element.peer_id}  [{status}]")
    return code


# -- plan ----------------------------------------------------------------------

def cmd_plan(args) -> int:
    if args.recommend is not None:
        rec = analysis.recommend_params(args.recommend, args.p[0] if args.p else None)
        print(f"n={rec.n} k={rec.k} p={rec.p} P={rec.probability:.3f} ({100 * rec.probability:.3f}%)")
        return EXIT_OK
    if not args.n or not args.k:
        raise CliError("plan needs --n and --k, or --recommend")
    rows = analysis.prob_table(args.n, args.k, args.p or [3])
    print(analysis.table_csv(rows) if args.csv else analysis.format_table(rows), end="" if args.csv else "\n")
    return EXIT_OK


# -- simulate ------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = simulation.SimConfig()
    if args.config:
        try:
            cfg = simulation.SimConfig.from_text(Path(args.config).read_text())
        except OSError as exc:
            raise CliError(f"cannot read simulation config: {exc}") from None
    for key in ("rounds", "seeds", "p"):
        value = getattr(args, key)
        if value is not None:
            setattr(cfg, key, value)
    if args.full_crypto:
        cfg.full_crypto = True
    if cfg.rounds < 0 or cfg.seeds < 1:
        raise CliError("rounds must be >= 0 and seeds >= 1")
    base = _seed(args)
    seeds = [base + i for i in range(cfg.seeds)]
    policy = PolicyConfig(p_receiver=cfg.p, p_provider=cfg.p, history_size=cfg.history_size)

    runs = []
    for seed in seeds:
        g = simulation.build_graph(cfg.community, cfg.world, seed, cfg.mix)
        runs.append(simulation.run_meetings(g, policy, cfg.rounds, seed, cfg.full_crypto,
                                            cfg.bootstrap_prob, max_ring=cfg.max_ring))
    header = {**cfg.as_dict(), "base_seed": base}
    sweep = simulation.p_sweep(None, cfg.p_values, cfg.rounds, seeds,
                               policy, cfg.max_ring, cfg.community, cfg.world, cfg.mix, cfg.bootstrap_prob)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(simulation.metrics_csv(runs, header))
    (out / "rings.csv").write_text(simulation.rings_csv(sweep, header))
    outsiders = [r.outsiders_lt4 for r in runs]
    print(f"seeds {seeds[0]}..{seeds[-1]} rounds={cfg.rounds} p={cfg.p}: "
          f"median outsiders_lt4={median(outsiders)} (max {max(outsiders)})")
    print("cluster size by p: " + " ".join(f"{p}:{v:.2f}" for p, v in sweep.cluster_median.items()))
    print(f"wrote {out / 'metrics.csv'} and {out / 'rings.csv'}")
    return EXIT_OK


# -- interact ------------------------------------------------------------------

def cmd_interact(args) -> int:
    seed = _seed(args)
    rng = random.Random(seed)
    t = args.now if args.now is not None else int(time.time())
    path_r, path_p = Path(args.receiver), Path(args.provider)
    if path_r.resolve() == path_p.resolve():
        raise CliError("receiver and provider must be different nodes")
    with file_lock(path_r), file_lock(path_p):
        state_r, receiver = _load_node(path_r, rng.getrandbits(64), lambda: t)
        state_p, provider = _load_node(path_p, rng.getrandbits(64), lambda: t)
        sessions = open_session(receiver, provider, seed=rng.getrandbits(64))
        r_sess, p_sess = sessions
        if r_sess.phase is Phase.REJECTED:
            raise CliError(f"channel failed: {r_sess.reason.value}", EXIT_CRYPTO)
        try:
            code = _interact(args, r_sess, p_sess, t)
        finally:
            if args.verbose:
                _print_transcript(sessions, 0)
            _save_node(path_r, state_r, receiver)
            _save_node(path_p, state_p, provider)
    return code


def _interact(args, r_sess, p_sess, t: int) -> int:
    if args.force_pair:
        r_sess.node.pairing_confirmed = p_sess.node.pairing_confirmed = True
        force_pairing(r_sess, p_sess, now=t)
        print(f"outcome: forced pairing {r_sess.node.id} <-> {p_sess.node.id}")
        return EXIT_OK
    decisions = negotiate(r_sess, p_sess, now=t)
    if r_sess.reason is Reason.PROOF_INVALID:
        print("outcome: ProofInvalid")
        return EXIT_CRYPTO
    for who, d in zip(("receiver", "provider"), decisions):
        if not d.allowed:
            print(f"outcome: denied by {who}: {d.verdict.value} ({d.reason})")
            return EXIT_DENIED
    outcome = run_service_interaction(r_sess, p_sess, args.service, provide=not args.refuse,
                                      trustor=not args.no_trustor,
                                      reciprocal=False if args.no_reciprocal else None, now=t)
    print(f"outcome: {outcome.kind.value} (verified common {r_sess.verified_count})")
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def _add_policy_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=[x.value for x in Pattern if x is not Pattern.CUSTOM])
    p.add_argument("--policy", help="key=value policy file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one policy key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kaatrust", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("imprint", help="issue a trust germ and create a node file")
    p.add_argument("--station", required=True, help="station file (created with --new-station)")
    p.add_argument("--new-station", metavar="STATION_ID")
    p.add_argument("--id", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--keystore", help="keystore path (default: OUT.keys)")
    p.add_argument("--seed", type=int)
    _add_policy_args(p)
    p.set_defaults(func=cmd_imprint)

    p = sub.add_parser("inspect", help="print a node file")
    p.add_argument("node")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("demo", help="alice/bob/charlie walk-through")
    p.add_argument("--p", type=int, default=1)
    p.add_argument("--tamper", action="store_true", help="corrupt charlie's proof from bob")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("plan", help="probability of p common acquaintances")
    p.add_argument("--n", type=int, nargs="+")
    p.add_argument("--k", type=int, nargs="+")
    p.add_argument("--p", type=int, nargs="+")
    p.add_argument("--recommend", type=int, metavar="N")
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="meeting simulation and p sweep")
    p.add_argument("config", nargs="?")
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--p", type=int)
    p.add_argument("--full-crypto", action="store_true")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("interact", help="one service interaction between two node files")
    p.add_argument("receiver")
    p.add_argument("provider")
    p.add_argument("--service", default="service")
    p.add_argument("--no-trustor", action="store_true")
    p.add_argument("--no-reciprocal", action="store_true")
    p.add_argument("--refuse", action="store_true")
    p.add_argument("--force-pair", action="store_true")
    p.add_argument("--now", type=int, help="timestamp (default: wall clock)")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true", help="print the protocol transcript")
    p.set_defaults(func=cmd_interact)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ProofInvalid, InvalidSignature, MacMismatch, UnverifiedEvent) as exc:
        print(f"error: verification failed: {exc}", file=sys.stderr)
        return EXIT_CRYPTO
    except (PairingRefused, BlacklistedPeer) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DENIED
    except StateLocked as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (WireError, DecodeError, ParameterMismatch, PolicyError, ValueError, ProtocolError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
