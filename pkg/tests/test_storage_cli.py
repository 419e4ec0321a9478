import os

import pytest

from conftest import T0, make_node, pair
from kaatrust.cli import EXIT_CRYPTO, EXIT_DENIED, EXIT_INPUT, EXIT_OK, main
from kaatrust.che import open_session, run_service_interaction, exchange_and_prove
from kaatrust.storage import (
    NodeStateFile,
    StateLocked,
    file_lock,
    read_keystore,
    read_station,
    write_keystore,
)
from kaatrust.wire import WireError

OPEN0 = ["--set", "p_receiver=0", "--set", "p_provider=0"]


def imprint(tmp_path, name, *extra, new_station=False, seed=7):
    argv = ["imprint", "--station", str(tmp_path / "station.kaa"), "--id", name,
            "--out", str(tmp_path / f"{name}.node"), "--seed", str(seed), *extra]
    if new_station:
        argv += ["--new-station", "home"]
    return main(argv)


@pytest.fixture
def nodes(tmp_path):
    assert imprint(tmp_path, "alice", *OPEN0, new_station=True) == EXIT_OK
    assert imprint(tmp_path, "bob", *OPEN0) == EXIT_OK
    return tmp_path / "alice.node", tmp_path / "bob.node"


def interact(a, b, *flags, now=T0, seed=1):
    return main(["interact", str(a), str(b), "--now", str(now), "--seed", str(seed), *flags])


# -- storage -------------------------------------------------------------------

def test_node_state_roundtrip_bit_exact(germs, tmp_path):
    alice, bob = make_node(germs["alice"]), make_node(germs["bob"])
    pair(alice, bob)
    a, b = open_session(alice, bob)
    exchange_and_prove(a, b, policy_p=0, now=T0)
    run_service_interaction(a, b, "x", provide=False, now=T0)
    state = NodeStateFile.from_node(alice, "alice.keys")
    path = tmp_path / "alice.node"
    state.save(path)
    again = NodeStateFile.load(path)
    assert again == state and again.to_bytes() == path.read_bytes()
    assert list(again.history) == list(alice.history)
    assert again.reputation == alice.reputation and again.policy == alice.policy
    assert not again.exportable


def test_node_state_rejects_corruption(germs, tmp_path):
    data = NodeStateFile.from_node(make_node(germs["alice"]), "k").to_bytes()
    for bad in (b"XXXX" + data[4:], data + b"\x00", data[:-3]):
        with pytest.raises(WireError):
            NodeStateFile.from_bytes(bad)


def test_keystore_roundtrip_and_permissions(germs, tmp_path):
    path = tmp_path / "k"
    write_keystore(path, germs["alice"])
    assert read_keystore(path, germs["alice"].public) == germs["alice"]
    assert os.stat(path).st_mode & 0o777 == 0o600
    with pytest.raises(WireError):
        read_keystore(path, germs["bob"].public)


def test_secrets_stay_out_of_node_file(germs):
    germ = germs["alice"]
    data = NodeStateFile.from_node(make_node(germ), "k").to_bytes()
    assert germ.export_secrets() not in data
    assert germ.enc_secret.to_bytes() not in data


def test_lock_is_exclusive(tmp_path):
    target = tmp_path / "x.node"
    with file_lock(target):
        with pytest.raises(StateLocked):
            with file_lock(target):
                pass
    with file_lock(target):
        pass


# -- imprint / inspect ---------------------------------------------------------

def test_imprint_then_inspect(nodes, capsys):
    alice, _ = nodes
    capsys.readouterr()
    assert main(["inspect", str(alice)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "id: alice" in out and "history size: 0/22" in out
    assert len(NodeStateFile.load(alice).history) == 0


def test_same_seed_same_keys(tmp_path):
    runs = []
    for sub in ("a", "b"):
        d = tmp_path / sub
        d.mkdir()
        assert imprint(d, "alice", new_station=True, seed=99) == EXIT_OK
        state = NodeStateFile.load(d / "alice.node")
        runs.append((state.public, (d / "alice.node.keys").read_bytes(), read_station(d / "station.kaa")))
    assert runs[0] == runs[1]


def test_imprint_input_errors(tmp_path, capsys):
    assert imprint(tmp_path, "alice") == EXIT_INPUT  # no station yet
    (tmp_path / "station.kaa").write_bytes(b"KAAS garbage")
    assert imprint(tmp_path, "alice") == EXIT_INPUT
    assert "error" in capsys.readouterr().err
    assert imprint(tmp_path, "alice", new_station=True) == EXIT_INPUT  # refuses to overwrite
    assert imprint(tmp_path / "x", "", new_station=True) == EXIT_INPUT
    (tmp_path / "station.kaa").unlink()
    assert imprint(tmp_path, "alice", "--set", "colour=blue", new_station=True) == EXIT_INPUT


def test_imprint_preset_and_policy_file(tmp_path):
    policy = tmp_path / "policy.txt"
    policy.write_text("p_receiver=5\n")
    assert imprint(tmp_path, "alice", "--preset", "market", "--policy", str(policy),
                   "--set", "min_score=-1", new_station=True) == EXIT_OK
    cfg = NodeStateFile.load(tmp_path / "alice.node").policy
    assert (cfg.pattern.value, cfg.p_receiver, cfg.p_provider, cfg.min_score) == ("market", 5, 3, -1.0)


# -- interact ------------------------------------------------------------------

def test_interact_default_grows_both(nodes, capsys):
    a, b = nodes
    assert interact(a, b) == EXIT_OK
    assert "outcome: full" in capsys.readouterr().out
    sa, sb = NodeStateFile.load(a), NodeStateFile.load(b)
    assert len(sa.history) == len(sb.history) == 1
    assert sa.history.elements[0].flags.rp and not sb.history.elements[0].flags.rp
    assert sa.reputation["bob"].direct.reciprocal_proofs == 1


def test_interact_refuse(nodes, capsys):
    a, b = nodes
    assert interact(a, b, "--refuse") == EXIT_OK
    assert "outcome: non-service" in capsys.readouterr().out
    sa, sb = NodeStateFile.load(a), NodeStateFile.load(b)
    assert len(sa.history) == len(sb.history) == 0
    assert sa.history.blacklist["bob"] == (1, T0)
    assert sa.reputation["bob"].direct.services_refused == 1


def test_interact_force_pair_fresh_nodes(tmp_path):
    assert imprint(tmp_path, "alice", new_station=True) == EXIT_OK
    assert imprint(tmp_path, "bob") == EXIT_OK
    a, b = tmp_path / "alice.node", tmp_path / "bob.node"
    # default policy needs 3 commons, a fresh node cannot have them
    assert interact(a, b) == EXIT_DENIED
    assert interact(a, b, "--force-pair") == EXIT_OK
    sa = NodeStateFile.load(a)
    assert len(sa.history) == 1 and sa.history.elements[0].message.startswith(b"TRUST|")


def test_interact_locked_file(nodes):
    a, b = nodes
    with file_lock(a):
        assert interact(a, b) == EXIT_INPUT
    assert interact(a, a) == EXIT_INPUT
    assert interact(a, a.with_name("nobody.node")) == EXIT_INPUT


def test_interact_tampered_history_is_rejected(nodes):
    a, b = nodes
    assert interact(a, b) == EXIT_OK
    raw = bytearray(b.read_bytes())
    raw[raw.index(b"SERVICE|") + 9] ^= 0x01
    b.write_bytes(bytes(raw))
    assert interact(a, b) == EXIT_CRYPTO


# -- demo / plan / simulate ----------------------------------------------------

def test_demo_codes(capsys):
    assert main(["demo", "--seed", "3"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "result: alice Trusted, charlie Trusted, verified common ['bob']" in out
    assert main(["demo", "--seed", "3", "--tamper"]) == EXIT_CRYPTO
    assert "ProofInvalid" in capsys.readouterr().out
    assert main(["demo", "--seed", "3", "--p", "2"]) == EXIT_DENIED
    assert "result: Rejected(ThresholdNotMet)" in capsys.readouterr().out


def test_plan(capsys):
    assert main(["plan", "--recommend", "100"]) == EXIT_OK
    assert "k=22 p=5 P=0.566" in capsys.readouterr().out
    assert main(["plan", "--n", "30", "--k", "12", "--p", "3"]) == EXIT_OK
    assert "96.198%" in capsys.readouterr().out
    assert main(["plan", "--n", "30", "100", "--k", "12", "--p", "3", "--csv"]) == EXIT_OK
    assert capsys.readouterr().out.splitlines() == [
        "population,k,p,probability", "30,12,3,0.9619799123", "100,12,3,0.1552472561"]
    assert main(["plan", "--n", "5", "--k", "6"]) == EXIT_INPUT
    assert main(["plan", "--n", "5"]) == EXIT_INPUT


def test_simulate_deterministic_and_zero_rounds(tmp_path, capsys):
    args = ["simulate", "--seed", "5", "--seeds", "2", "--rounds", "3"]
    assert main(args + ["--out-dir", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out-dir", str(tmp_path / "b")]) == EXIT_OK
    for name in ("metrics.csv", "rings.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert "median outsiders_lt4=" in capsys.readouterr().out
    assert main(["simulate", "--seed", "5", "--seeds", "1", "--rounds", "0", "--out-dir", str(tmp_path / "z")]) == 0
    lines = (tmp_path / "z" / "metrics.csv").read_text().splitlines()
    assert lines[-1] == "round,trust_edges,mean_common,outsiders_lt4,seed"
    assert any(line == "# mix=0.8" for line in lines)


def test_simulate_config_errors(tmp_path):
    cfg = tmp_path / "sim.cfg"
    cfg.write_text("colour=red\n")
    assert main(["simulate", str(cfg), "--out-dir", str(tmp_path)]) == EXIT_INPUT
    assert main(["simulate", str(tmp_path / "missing.cfg")]) == EXIT_INPUT
    assert main(["simulate", "--rounds", "-1", "--out-dir", str(tmp_path)]) == EXIT_INPUT
