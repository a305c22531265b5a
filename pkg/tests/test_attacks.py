import numpy as np
import pytest

from certsmooth import pe_format
from certsmooth.attacks import (ATTACKS, GaConfig, PlanKind, alignment_mismatches, attack_file, build_plan,
                                combined, extend_code_caves, ga_optimize, inject_sections, make_predictor,
                                padding_slack, plan_certified, random_fill, rows_to_jsonl, run_attack,
                                shift_sections, summarize, summary_table, validate_plan)
from certsmooth.attacks.ga import tiled_snippet
from certsmooth.errors import AlignmentError, EmptyWritable
from certsmooth.smoothing import tally_chunks


@pytest.mark.parametrize("attack", ATTACKS)
def test_plans_valid_and_aligned(attack, samples, benign_pool):
    for data, _ in samples[:15]:
        plan = build_plan(attack, data, pool=benign_pool)
        assert validate_plan(plan) == []
        assert pe_format.serialize(pe_format.parse(plan.to_bytes())) == plan.to_bytes()
        rng = np.random.default_rng(0)
        filled = plan.apply(rng.integers(0, 256, plan.n_writable, dtype=np.uint8))
        assert pe_format.validate_structure(pe_format.parse(filled)) == []
        for z in (512, 1024):
            bad, checked = alignment_mismatches(data, plan, z)
            assert bad == 0 and checked > 0


def test_padding_slack_regions(samples):
    img = pe_format.parse(samples[0][0])
    plan = padding_slack(img, 1000)
    slack = pe_format.slack_regions(img)
    assert plan.writable_regions[-1] == (len(img), 1000)
    assert plan.insertion_sizes == (1000,)
    assert plan.patch_sizes == tuple(r.length for r in slack)
    assert len(plan.to_bytes()) == len(img) + 1000


def test_shift_moves_every_section(samples):
    img = pe_format.parse(samples[1][0])
    plan = shift_sections(img, 4096)
    for a, b in zip(img.sections, plan.transformed.sections):
        if a.size_of_raw_data:
            assert b.pointer_to_raw_data == a.pointer_to_raw_data + 4096
    assert plan.writable_regions == ((img.header_block_len, 4096),)
    with pytest.raises(AlignmentError):
        shift_sections(img, 100)


def test_caves_one_gap_per_section(samples):
    img = pe_format.parse(samples[2][0])
    plan = extend_code_caves(img, 512)
    assert len(plan.writable_regions) == len(img.raw_indices())
    assert len(plan.to_bytes()) == len(img) + 512 * len(img.raw_indices())


def test_inject_respects_cap(samples, benign_pool):
    data = samples[3][0]
    img = pe_format.parse(data)
    plan = inject_sections(img, 10, seed_content=benign_pool)
    added = plan.transformed.sections[len(img.sections):]
    assert len(added) == 10
    assert all(s.name.startswith(b".inj") for s in added)
    assert sum(s.size_of_raw_data for s in added) <= 2 * len(data)
    assert plan.transformed.coff_header.number_of_sections == len(img.sections) + 10


def test_combined_records_four_steps(samples, benign_pool):
    plan = combined(pe_format.parse(samples[4][0]), benign_pool, seed=1)
    assert plan.kind is PlanKind.COMBINED
    assert [s["op"] for s in plan.provenance["steps"]] == ["shift", "code_caves", "section_inject", "padding_slack"]


def test_ga_monotone_and_deterministic(samples, benign_pool, prefix_model):
    plan = build_plan("padding", samples[5][0])
    target = prefix_model.score_file
    cfg = GaConfig(max_steps=8, seed=3)
    a = ga_optimize(plan, target, cfg, benign_pool)
    b = ga_optimize(plan, target, cfg, benign_pool)
    assert a.best_bytes == b.best_bytes and a.history == b.history
    assert list(a.history) == sorted(a.history, reverse=True)
    assert len(a.history) <= 8 and a.best_score <= target(plan.to_bytes())
    assert a.best_score == target(a.best_bytes)
    assert pe_format.validate_structure(pe_format.parse(a.best_bytes)) == []
    r = random_fill(plan, target, 20, seed=1, pool=benign_pool)
    assert r.evaluations == 20 and len(r.history) == 20


def test_ga_flat_fitness(samples):
    plan = build_plan("padding", samples[5][0], {"pad_bytes": 100})
    res = ga_optimize(plan, lambda b: 0.7, GaConfig(max_steps=5))
    assert set(res.history) == {0.7}


def test_ga_empty_plan(samples):
    plan = build_plan("padding", samples[0][0], {"pad_bytes": 0})
    with pytest.raises(EmptyWritable):
        ga_optimize(plan, lambda b: 0.0)


def test_ga_config_validation():
    with pytest.raises(ValueError):
        GaConfig(population=1)
    with pytest.raises(ValueError):
        GaConfig(byte_mutation_prob=1.5)


def test_tiled_snippet():
    rng = np.random.default_rng(0)
    pool = np.arange(1000, dtype=np.uint8)
    out = tiled_snippet(pool, 5000, rng)
    assert out.size == 5000 and set(out) <= set(pool)


def test_harness_rows_and_summary(samples, benign_pool, chunk_model, prefix_model):
    mal = [d for d, y in samples if y == 1][:3]
    ga = GaConfig(max_steps=3)
    rows = run_attack(mal, "padding", make_predictor("chunk", chunk_model), ga, pool=benign_pool)
    rows += run_attack(mal, "padding", make_predictor("ns-baseline", prefix_model), ga, pool=benign_pool, threads=2)
    assert len(rows) == 6 and all(set(r) >= {"sha256", "evaded", "certified", "adv_score"} for r in rows)
    text = rows_to_jsonl(rows)
    assert len(text.splitlines()) == 6
    summary = summarize(rows)
    for s in summary:
        if s.scheme == "chunk":
            assert s.cert_acc is not None and s.cert_acc <= s.adv_acc
    assert "adv_acc (certified)" in summary_table(summary)


def test_certified_files_are_not_evaded(samples, benign_pool, chunk_model):
    pred = make_predictor("chunk", chunk_model)
    for data in [d for d, y in samples if y == 1][:5]:
        row = attack_file(data, "padding_slack", pred, GaConfig(max_steps=3), {"pad_bytes": 2000}, benign_pool)
        if row["certified"]:
            assert not row["evaded"] and row["adv_score"] >= 0.5


def test_plan_certified_uses_structure(samples, chunk_model):
    data = [d for d, y in samples if y == 1][0]
    tally = tally_chunks(chunk_model, data, 512)
    plan = build_plan("shift", data, {"amount": 512})
    from certsmooth.certify import certify_mixed
    table = [n for _, n in plan.structural_regions]
    assert plan_certified(plan, tally) == certify_mixed(tally, table, [512], 512).certified
