import json
import math
from dataclasses import replace

import numpy as np
import pytest

from streamnas import hwcost
from streamnas.data import generate_synthetic
from streamnas.errors import CheckpointError
from streamnas.nas import (
    ALL_OBJECTIVES,
    CHEAP_OBJECTIVES,
    CheapObjectives,
    Individual,
    ParetoArchive,
    SearchConfig,
    cheap_evaluate,
    dominates,
    hypervolume,
    mutate,
    novelty,
    pareto_update,
    pick,
    preselect,
    replay_log,
    run_search,
)
from streamnas.topology import (
    DEFAULT_SPACE,
    DSConv1D,
    Dense,
    GeneSlot,
    Genome,
    GlobalAvgPool,
    MaxPool1D,
    Topology,
    decode,
    encode,
    infer_shapes,
    param_count,
    random_genome,
    with_layer,
)
from streamnas.trainer import TrainConfig


def fake_job(genome, train_config):
    """Deterministic stand-in for training: scores depend only on the genome."""
    topo = decode(genome)
    n = param_count(topo)
    det = 0.5 + 0.5 * math.sin(n) ** 2
    fa = 0.3 * math.cos(len(topo.layers) + n) ** 2
    return {"neg_detection": -det, "false_alarm": fa, "accuracy": 1 - fa, "loss": fa}, None, 0.0, 0.0


def failing_job(genome, train_config):
    if decode(genome).layers[0].kind == "maxpool":
        return None, "RuntimeError: simulated worker crash", 0.0, 0.0
    return fake_job(genome, train_config)


@pytest.fixture(scope="module")
def tiny_dataset():
    return generate_synthetic(60, 64, seed=0)


def _ind(values, i=0):
    """Individual whose two objectives are given directly as cheap values."""
    g = Genome(tuple(GeneSlot(True, DSConv1D(3, 1, 4)) for _ in range(2)), 2, 64)
    vals = dict.fromkeys(CHEAP_OBJECTIVES, 0.0)
    vals["params"], vals["latency_min"] = values
    return Individual(g, i, cheap=CheapObjectives(True, vals), expensive={})


def test_pareto_update_examples():
    names = ("params", "latency_min")
    a = ParetoArchive(names)
    pareto_update(a, _ind((1, 2), 0))
    pareto_update(a, _ind((2, 1), 1))
    b = ParetoArchive(names)
    for m in a:
        b.insert(m)
    pareto_update(a, _ind((1, 1), 2))
    assert sorted(map(tuple, a.vectors())) == [(1, 1)]
    assert not b.insert(_ind((3, 3), 3)) and len(b) == 2
    assert b.insert(_ind((0.5, 3), 4)) and len(b) == 3


def test_dominance_is_weak():
    assert dominates(np.array([1, 1]), np.array([1, 2]))
    assert not dominates(np.array([1, 2]), np.array([1, 2]))
    assert not dominates(np.array([0, 3]), np.array([1, 2]))


def test_archive_soundness_and_order_independence(rng):
    names = ("params", "latency_min")
    pts = rng.random((400, 2))
    inds = [_ind(tuple(p), i) for i, p in enumerate(pts)]
    a = ParetoArchive(names)
    for ind in inds:
        a.insert(ind)
    v = a.vectors()
    for i in range(len(v)):
        for j in range(len(v)):
            assert i == j or not dominates(v[i], v[j])
    b = ParetoArchive(names)
    for k in rng.permutation(len(inds)):
        b.insert(inds[k])
    assert a.ids() == b.ids()


def test_hypervolume_exact_2d():
    assert hypervolume(np.array([[1, 2], [2, 1]]), np.array([3, 3])) == pytest.approx(3.0)
    assert hypervolume(np.array([[4, 4]]), np.array([3, 3])) == 0.0


def test_hypervolume_monte_carlo_close_to_exact(rng):
    pts = rng.random((20, 2))
    exact = hypervolume(pts, np.array([1.0, 1.0]))
    samples = rng.random((200000, 2))
    est = hypervolume(pts, np.array([1.0, 1.0]), samples=samples)
    assert est == pytest.approx(exact, abs=0.01)


def test_mutate_zero_rates_is_identity(rng):
    g = random_genome(DEFAULT_SPACE, rng)
    assert mutate(g, 0.0, 0.0, rng).slots == g.slots


def test_mutate_is_reproducible(rng):
    g = random_genome(DEFAULT_SPACE, rng)
    a = mutate(g, 0.3, 0.3, np.random.default_rng(9))
    b = mutate(g, 0.3, 0.3, np.random.default_rng(9))
    assert a == b


def test_mutate_repairs_depth(rng):
    g = Genome(tuple(GeneSlot(i < 2, DSConv1D(3, 1, 4)) for i in range(15)), 2, 512)
    for seed in range(50):
        child = mutate(g, 0.9, 0.0, np.random.default_rng(seed))
        assert 2 <= child.depth <= 15
    # flipping every slot deactivates both active ones; repair reactivates from the front
    child = mutate(g, 1.0, 0.0, rng)
    assert child.depth == 13


def test_mutate_lowest_index_repair(rng):
    small = replace(DEFAULT_SPACE, max_depth=3)
    g3 = Genome((GeneSlot(True, DSConv1D(3, 1, 4)), GeneSlot(True, DSConv1D(3, 1, 4)),
                 GeneSlot(False, DSConv1D(3, 1, 4))), 2, 512)
    # every flag flips, leaving one active slot; repair reactivates slot 0 first
    child = mutate(g3, 1.0, 0.0, rng, small)
    assert [s.active for s in child.slots] == [True, False, True]


def test_dormant_only_mutation_is_neutral(rng):
    for _ in range(50):
        g = random_genome(DEFAULT_SPACE, rng, 2, 512, max_active=6)
        before = cheap_evaluate(g)
        g2 = g
        for i, s in enumerate(g.slots):
            if not s.active:
                g2 = with_layer(g2, i, MaxPool1D(5))
        assert decode(g2) == decode(g)
        assert cheap_evaluate(g2) == before


def test_cheap_evaluate_matches_direct_calls():
    topo = Topology((DSConv1D(9, 2, 32), DSConv1D(5, 2, 16), GlobalAvgPool(), Dense(2)), 2, 512)
    g = encode(topo)
    c = cheap_evaluate(g)
    lo = hwcost.evaluate(topo)
    u = hwcost.optimize_unrolling(topo, infer_shapes(topo), "min_energy", hwcost.DEFAULT_BUDGET)
    hi = hwcost.evaluate(topo, u)
    assert c.feasible
    assert c.values == {
        "params": float(param_count(topo)),
        "latency_min": lo.t_total_s, "power_min": lo.P_total, "energy_min": lo.E_total,
        "latency_max": hi.t_total_s, "power_max": hi.P_total, "energy_max": hi.E_total,
    }


def test_cheap_evaluate_marks_collapse():
    g = Genome(tuple(GeneSlot(True, DSConv1D(9, 3, 4)) for _ in range(6)), 2, 64)
    assert cheap_evaluate(g) == CheapObjectives(False)


def test_unrolled_power_not_lower(rng):
    for _ in range(40):
        c = cheap_evaluate(random_genome(DEFAULT_SPACE, rng, 2, 512, max_active=8))
        assert c.values["power_min"] <= c.values["power_max"]


def _children(rng, n, start=100):
    out = []
    for i in range(n):
        g = random_genome(DEFAULT_SPACE, rng, 2, 512, max_active=6)
        out.append(Individual(g, start + i, cheap=cheap_evaluate(g)))
    return out


def test_preselect_fraction_one_keeps_all_feasible(rng):
    kids = _children(rng, 6)
    kids.append(Individual(kids[0].genome, 999, cheap=CheapObjectives(False)))
    archive = ParetoArchive()
    chosen = preselect(kids, archive, 1.0)
    assert sorted(c.id for c in chosen) == sorted(k.id for k in kids if k.cheap.feasible)


def test_preselect_ranks_duplicates_last(rng):
    kids = _children(rng, 5)
    archive = ParetoArchive(CHEAP_OBJECTIVES)
    archive.insert(kids[0])
    dup = Individual(kids[0].genome, 500, cheap=kids[0].cheap)
    chosen = preselect(kids[1:] + [dup], archive, 1.0)
    assert chosen[-1].id == 500
    assert novelty([dup], archive) == [0.0]


def test_preselect_keeps_the_farther_child():
    names = ("params", "latency_min")
    archive = ParetoArchive(names)
    archive.insert(_ind((0, 0), 0))
    near, far = _ind((1, 1), 1), _ind((2, 2), 2)
    assert [c.id for c in preselect([near, far], archive, 0.5)] == [2]


def test_preselect_empty():
    assert preselect([], ParetoArchive(), 0.5) == []
    g = Genome(tuple(GeneSlot(True, DSConv1D(9, 3, 4)) for _ in range(6)), 2, 64)
    assert preselect([Individual(g, 0, cheap=CheapObjectives(False))], ParetoArchive(), 0.5) == []


def test_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(preselect_fraction=0.0)
    with pytest.raises(ValueError):
        SearchConfig(children_per_generation=0)
    with pytest.raises(ValueError):
        SearchConfig(objectives=("speed",))
    assert SearchConfig().generations == 100 and SearchConfig().children_per_generation == 20


def _cfg(**kw):
    base = dict(generations=3, children_per_generation=6, initial_random=4, seed=11, train=TrainConfig(epochs=1))
    base.update(kw)
    return SearchConfig(**base)


def test_search_is_deterministic(tiny_dataset, tmp_path):
    a = run_search(_cfg(), tiny_dataset, tmp_path / "a", job=fake_job)
    b = run_search(_cfg(), tiny_dataset, tmp_path / "b", job=fake_job)
    assert [m.to_dict() for m in a.archive.sorted_members()] == [m.to_dict() for m in b.archive.sorted_members()]
    for gen in range(4):
        name = f"checkpoints/gen_{gen:04d}.json"
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_zero_generations_keeps_initial_front(tiny_dataset):
    r = run_search(_cfg(generations=0, initial_random=8), tiny_dataset, job=fake_job)
    trained = [i for i in r.evaluated if i.expensive is not None]
    vecs = np.array([i.objectives(ALL_OBJECTIVES) for i in trained])
    front = {trained[k].id for k in range(len(trained))
             if not any(dominates(vecs[j], vecs[k]) for j in range(len(trained)))}
    assert r.archive.ids() == front


def test_training_economy_and_infeasible_never_trained(tiny_dataset):
    cfg = _cfg(generations=4, preselect_fraction=0.5)
    r = run_search(cfg, tiny_dataset, job=fake_job)
    for gen, runs in r.training_runs.items():
        if gen > 0:
            assert runs <= math.ceil(cfg.preselect_fraction * cfg.children_per_generation)
    for ind in r.evaluated:
        if not ind.cheap.feasible:
            assert ind.expensive is None and ind.status == "infeasible"
        assert (ind.expensive is not None) == (ind.status == "trained")


def test_worker_failure_is_tolerated(tiny_dataset, tmp_path):
    r = run_search(_cfg(generations=3), tiny_dataset, tmp_path, job=failing_job)
    failed = [i for i in r.evaluated if i.status == "failed"]
    assert all(i.expensive is None for i in failed)
    assert all(m.status == "trained" for m in r.archive)
    log = [json.loads(l) for l in (tmp_path / "run_log.jsonl").read_text().splitlines()]
    assert len(log) == len(r.evaluated) == len(r.log)
    assert [e["id"] for e in log] == [e["id"] for e in r.log]
    assert all(e["error"] for e in log if e["status"] == "failed")


def test_hypervolume_never_shrinks(tiny_dataset):
    names = ("params", "neg_detection", "false_alarm")
    samples = np.random.default_rng(0).random((20000, 3))
    ref = np.array([50000.0, 0.0, 1.0])
    lower = np.array([0.0, -1.0, 0.0])
    seen = []

    def hv(gen, archive):
        seen.append(hypervolume(archive.vectors(), ref, samples=samples, lower=lower))

    run_search(_cfg(generations=5, objectives=names), tiny_dataset, job=fake_job, on_generation=hv)
    assert all(b >= a for a, b in zip(seen, seen[1:]))


def test_replaying_shuffled_log_gives_same_archive(tiny_dataset, tmp_path, rng):
    r = run_search(_cfg(generations=4), tiny_dataset, tmp_path, job=fake_job)
    entries = [json.loads(l) for l in (tmp_path / "run_log.jsonl").read_text().splitlines()]
    for _ in range(5):
        order = rng.permutation(len(entries))
        assert replay_log([entries[k] for k in order], ALL_OBJECTIVES).ids() == r.archive.ids()


def test_resume_reproduces_uninterrupted_run(tiny_dataset, tmp_path):
    full = run_search(_cfg(generations=3), tiny_dataset, tmp_path / "full", job=fake_job)
    run_search(_cfg(generations=1), tiny_dataset, tmp_path / "part", job=fake_job)
    resumed = run_search(_cfg(generations=3), tiny_dataset, tmp_path / "part", job=fake_job,
                         resume=tmp_path / "part" / "checkpoints" / "gen_0001.json")
    assert resumed.archive.ids() == full.archive.ids()


def test_corrupt_checkpoint_aborts(tiny_dataset, tmp_path):
    bad = tmp_path / "gen_0001.json"
    bad.write_text("{not json")
    with pytest.raises(CheckpointError):
        run_search(_cfg(), tiny_dataset, resume=bad, job=fake_job)
    bad.write_text(json.dumps({"generation": 1}))
    with pytest.raises(CheckpointError):
        run_search(_cfg(), tiny_dataset, resume=bad, job=fake_job)


def test_multi_worker_matches_single_worker(tiny_dataset):
    cfg = _cfg(generations=1, children_per_generation=4, initial_random=3)
    one = run_search(cfg, tiny_dataset)
    two = run_search(replace(cfg, worker_count=2), tiny_dataset)
    assert [m.to_dict() for m in one.archive.sorted_members()] == \
           [m.to_dict() for m in two.archive.sorted_members()]


def test_pick_prefers_members_within_limits():
    names = ("params", "latency_min")
    a = ParetoArchive(names)
    good, bad = _ind((5, 1), 0), _ind((1, 5), 1)
    good.expensive = {"neg_detection": -0.95, "false_alarm": 0.05}
    bad.expensive = {"neg_detection": -0.5, "false_alarm": 0.5}
    a.insert(good)
    a.insert(bad)
    assert pick(a, "params").id == 0
    assert pick(ParetoArchive(names), "params") is None
