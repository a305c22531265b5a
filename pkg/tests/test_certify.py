import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from certsmooth.certify import (AttackKind, adversary_oracle, certified_accuracy, certified_accuracy_from_tallies,
                                certify, certify_mixed, clean_accuracy_from_tallies, delta, max_certified_p,
                                oracle_search, payload_for, sweep, sweep_csv)
from certsmooth.errors import MismatchedZ, TooLarge, UnalignedTally, ZeroPayload
from certsmooth.smoothing import BENIGN, MALICIOUS, ChunkTally, tally_chunks
from oracles import soundness_sweep, tightness_witnesses


def test_delta_values():
    assert delta([1], 512) == 2
    assert delta([512], 512) == 2
    assert delta([513], 512) == 3
    assert delta([100, 1024], 512) == 2 + 3
    with pytest.raises(ZeroPayload):
        delta([0], 512)
    with pytest.raises(ZeroPayload):
        delta([], 512)


def test_margins():
    t = ChunkTally.from_labels([1] * 7 + [0] * 2, 16)
    patch = certify(t, "patch", [16], 16)
    assert (patch.delta, patch.margin_required, patch.margin_actual, patch.certified) == (2, 4, 5, True)
    ins = certify(t, "insertion", [48], 16)
    assert (ins.delta, ins.margin_required, ins.certified) == (4, 4, True)
    benign = ChunkTally.from_labels([0] * 6 + [1] * 2, 16)
    c = certify(benign, "patch", [1], 16)
    assert c.label == BENIGN and c.margin_actual == 6 - 2 - 1


def test_open_tail_adds_one():
    aligned = ChunkTally.from_labels([1, 1, 1, 0, 0], 16)
    tail = ChunkTally.from_labels([1, 1, 1, 0, 0], 16, tail_bytes=5)
    assert certify(tail, "insertion", [1], 16).margin_required == certify(aligned, "insertion", [1], 16).margin_required + 1


def test_errors():
    t = ChunkTally.from_labels([1, 1], 16)
    with pytest.raises(MismatchedZ):
        certify(t, "patch", [1], 32)
    with pytest.raises(UnalignedTally):
        certify(ChunkTally.from_labels([1, 1], 16, preprocessed=False), "insertion", [1], 16)
    with pytest.raises(TooLarge):
        oracle_search(ChunkTally.from_labels([1] * 21, 16), "patch", [1], 16)


def test_soundness_small_exhaustive():
    checked, violations = soundness_sweep(max_n=8, z=16)
    assert checked > 1000 and violations == []


@given(st.lists(st.sampled_from([0, 1]), min_size=1, max_size=14), st.integers(1, 400),
       st.sampled_from(["patch", "insertion"]), st.sampled_from([None, 1, 7, 15]))
@settings(max_examples=300, deadline=None)
def test_soundness_property(bits, p, kind, tail):
    tally = ChunkTally.from_labels(bits, 16, tail_bytes=tail)
    if certify(tally, kind, [p], 16).certified:
        assert adversary_oracle(tally, kind, [p], 16) == certify(tally, kind, [p], 16).label


@given(st.lists(st.sampled_from([0, 1]), min_size=1, max_size=10), st.lists(st.integers(1, 60), min_size=1, max_size=2),
       st.lists(st.integers(1, 60), min_size=1, max_size=2))
@settings(max_examples=150, deadline=None)
def test_mixed_soundness(bits, patches, inserts):
    tally = ChunkTally.from_labels(bits, 16, tail_bytes=9)
    cert = certify_mixed(tally, patches, inserts, 16)
    if cert.certified:
        assert not oracle_search(tally, "insertion", inserts, 16, patch_sizes=patches).flipped


def test_tightness():
    assert tightness_witnesses() == {"patch": True, "insertion": True}


def test_max_certified_p_is_threshold():
    t = ChunkTally.from_labels([1] * 15 + [0] * 3, 16)
    for kind in AttackKind:
        p = max_certified_p(t, kind)
        assert p > 0
        assert certify(t, kind, [p], 16).certified
        assert not certify(t, kind, [p + 1], 16).certified


def test_payload_for():
    assert payload_for(1000, 0.5) == 500
    assert payload_for(1001, 0.5) == 501
    assert payload_for(10, 0.0001) == 1


def test_forced_zeros_and_sweep(chunk_model, samples):
    assert certified_accuracy(samples, chunk_model, 512, "patch", 0.5) == 0.0
    assert certified_accuracy(samples, chunk_model, 512, "insertion", 1.0) == 0.0
    tallies = [(tally_chunks(chunk_model, d, 512), len(d), y) for d, y in samples]
    clean = clean_accuracy_from_tallies(tallies)
    rows = sweep(tallies, ["patch", "insertion"], [0.01, 0.05, 0.10, 0.30, 0.50])
    for kind in ("patch", "insertion"):
        accs = [a for _, k, a, _ in rows if k == kind]
        assert accs == sorted(accs, reverse=True) and accs[0] <= clean
    assert certified_accuracy_from_tallies(tallies, "patch", 0.01) > 0
    text = sweep_csv(rows)
    assert text.splitlines()[0] == "p_fraction,kind,certified_accuracy,n_files"
    assert len(text.splitlines()) == 11


def test_oracle_reports_flip_witness():
    r = oracle_search(ChunkTally.from_labels([1, 1, 0], 16), "patch", [1], 16)
    assert r.flipped and r.label == BENIGN and r.flip is not None
    r = oracle_search(ChunkTally.from_labels([1, 1, 1, 1, 1], 16), "patch", [1], 16)
    assert not r.flipped and r.label == MALICIOUS and r.max_touched == 1
