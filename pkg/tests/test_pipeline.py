import numpy as np
import pytest

from deinforeg import network as nw
from deinforeg.data import batches, gen_blobs, one_hot, standardize
from deinforeg.losses import LossConfig
from deinforeg.network import build, train_step_deinforeg, uniform_spec
from deinforeg.pipeline import (FIGURE_STAGE_COSTS, ScheduleEvent, StageCost, emit_gantt,
                                parse_gantt, partition_contiguous, run_pipelined, simulate)
from deinforeg.tensor import Matrix, RngState


# -- independent earliest-start oracle ----------------------------------------


def _oracle_makespan(mode, costs, devices):
    """Longest-path earliest-start schedule over the explicit task DAG.

    Tasks are (stage, module); edges encode both data dependencies and the
    per-device execution order, so the makespan is the critical path.
    """
    import networkx as nx

    n = costs.modules
    dur = {}
    g = nx.DiGraph()

    def dev(l):
        return 0 if mode == "bp" else l % devices

    def add(task, duration):
        dur[task] = duration
        g.add_node(task)

    for l in range(n):
        add(("FW", l), costs.forward[l])
        add(("BW", l), costs.backward[l])
        add(("UP", l), costs.update[l])
    if mode in ("bp", "nmp"):
        add(("LOSS", n - 1), costs.loss[n - 1])
        chain = ([("FW", l) for l in range(n)] + [("LOSS", n - 1)]
                 + [("BW", l) for l in range(n - 1, -1, -1)]
                 + [("UP", l) for l in range(n - 1, -1, -1)])
        for a, b in zip(chain, chain[1:]):
            stage_a, la = a
            stage_b, lb = b
            xfer = costs.transfer if (mode == "nmp" and dev(la) != dev(lb)
                                      and stage_b in ("FW", "BW")
                                      and stage_a in ("FW", "LOSS", "BW")) else 0.0
            g.add_edge(a, b, lag=xfer)
    else:
        for l in range(n):
            add(("LOSS", l), costs.loss[l])
            g.add_edge(("FW", l), ("LOSS", l), lag=0.0)
            g.add_edge(("LOSS", l), ("BW", l), lag=0.0)
            g.add_edge(("BW", l), ("UP", l), lag=0.0)
            if l + 1 < n:
                xfer = costs.transfer if dev(l) != dev(l + 1) else 0.0
                g.add_edge(("FW", l), ("FW", l + 1), lag=xfer)
            # device-serialization: a device's modules run in index order
            nxt = l + devices
            if mode == "deinforeg" and nxt < n:
                g.add_edge(("UP", l), ("FW", nxt), lag=0.0)

    start = {}
    for task in nx.topological_sort(g):
        start[task] = max((start[p] + dur[p] + g.edges[p, task]["lag"]
                           for p in g.predecessors(task)), default=0.0)
    return max(start[t] + dur[t] for t in g.nodes)


def _random_costs(rng, modules, transfer=0.0, shared_loss=True):
    f = rng.uniform(1, modules, 0.1, 3.0).a[0]
    b = rng.uniform(1, modules, 0.1, 3.0).a[0]
    u = rng.uniform(1, modules, 0.1, 3.0).a[0]
    if shared_loss:
        loss = (float(rng.uniform(1, 1, 0.1, 3.0).a[0, 0]),) * modules
    else:
        loss = tuple(rng.uniform(1, modules, 0.1, 3.0).a[0])
    return StageCost(tuple(f), loss, tuple(b), tuple(u), transfer)


# -- simulator ----------------------------------------------------------------


def test_reference_timing_17_vs_8():
    bp_makespan, _ = simulate("bp", FIGURE_STAGE_COSTS, devices=1)
    de_makespan, _ = simulate("deinforeg", FIGURE_STAGE_COSTS, devices=4)
    assert bp_makespan == 17.0
    assert de_makespan == 8.0


def test_zero_durations_zero_makespan():
    costs = StageCost.uniform(4, 0, 0, 0, 0)
    for mode, devices in (("bp", 1), ("nmp", 4), ("deinforeg", 4)):
        makespan, _ = simulate(mode, costs, devices)
        assert makespan == 0.0


def test_mode_ordering_against_oracle_100_random_costs():
    rng = RngState(70)
    for trial in range(100):
        modules = int(rng.integers(2, 7, 1)[0])
        devices = int(rng.integers(2, 5, 1)[0])
        costs = _random_costs(rng, modules)
        results = {}
        for mode in ("bp", "nmp", "deinforeg"):
            makespan, _ = simulate(mode, costs, devices)
            assert makespan == pytest.approx(_oracle_makespan(mode, costs, devices),
                                             abs=1e-9), (mode, trial)
            results[mode] = makespan
        assert results["deinforeg"] <= results["nmp"] + 1e-9
        assert results["nmp"] <= results["bp"] + 1e-9


def test_decoupled_beats_nmp_with_transfers():
    rng = RngState(71)
    for _ in range(30):
        costs = _random_costs(rng, 4, transfer=float(rng.uniform(1, 1, 0, 2).a[0, 0]))
        de, _ = simulate("deinforeg", costs, 4)
        nmp, _ = simulate("nmp", costs, 4)
        assert de <= nmp + 1e-9


def test_no_device_overlap_and_fw_dependencies():
    rng = RngState(72)
    costs = _random_costs(rng, 5, transfer=0.3)
    for mode, devices in (("bp", 1), ("nmp", 3), ("deinforeg", 3)):
        _, events = simulate(mode, costs, devices, batches=3)
        by_device = {}
        for e in events:
            by_device.setdefault(e.device, []).append(e)
        for dev_events in by_device.values():
            dev_events.sort(key=lambda e: e.start)
            for a, b in zip(dev_events, dev_events[1:]):
                assert a.end <= b.start + 1e-12
        fw = {(e.module, e.batch): e for e in events if e.stage == "FW"}
        for (module, batch), e in fw.items():
            if module > 0:
                assert e.start >= fw[(module - 1, batch)].end - 1e-12
        if mode == "bp":
            bw = {(e.module, e.batch): e for e in events if e.stage == "BW"}
            for (module, batch), e in bw.items():
                if (module + 1, batch) in bw:
                    assert e.start >= bw[(module + 1, batch)].end - 1e-12


def test_makespan_monotone_in_stage_durations():
    costs = FIGURE_STAGE_COSTS
    base, _ = simulate("deinforeg", costs, 4)
    for l in range(4):
        for stage in ("forward", "loss", "backward", "update"):
            bumped = list(getattr(costs, stage))
            bumped[l] += 0.7
            kwargs = {s: getattr(costs, s) for s in ("forward", "loss", "backward", "update")}
            kwargs[stage] = tuple(bumped)
            up, _ = simulate("deinforeg", StageCost(**kwargs, transfer=costs.transfer), 4)
            assert up >= base - 1e-12


def test_multi_batch_pipeline_overlaps():
    makespan1, _ = simulate("deinforeg", FIGURE_STAGE_COSTS, 4, batches=1)
    makespan4, _ = simulate("deinforeg", FIGURE_STAGE_COSTS, 4, batches=4)
    assert makespan4 < 4 * makespan1  # batches overlap across devices


def test_simulate_validates_arguments():
    with pytest.raises(ValueError):
        simulate("gpipe", FIGURE_STAGE_COSTS, 4)
    with pytest.raises(ValueError):
        simulate("bp", FIGURE_STAGE_COSTS, 0)
    with pytest.raises(ValueError):
        StageCost((), (), (), ())
    with pytest.raises(ValueError):
        StageCost((1.0,), (1.0,), (-1.0,), (1.0,))


# -- gantt trace ----------------------------------------------------------------


def test_gantt_empty_and_single_event(tmp_path):
    path = str(tmp_path / "g.csv")
    emit_gantt([], path)
    assert open(path).read().strip() == "device,stage,module,batch,start,end"
    emit_gantt([ScheduleEvent(0, "FW", 0, 0, 0.0, 1.5)], path)
    lines = open(path).read().strip().splitlines()
    assert len(lines) == 2


def test_gantt_roundtrip(tmp_path):
    _, events = simulate("deinforeg", FIGURE_STAGE_COSTS, 4, batches=2)
    path = str(tmp_path / "g.csv")
    emit_gantt(events, path)
    parsed = parse_gantt(path)
    assert sorted(parsed, key=lambda e: (e.start, e.device, e.module, e.batch, e.stage)) == \
        sorted(events, key=lambda e: (e.start, e.device, e.module, e.batch, e.stage))


# -- executor ----------------------------------------------------------------


def _small_net(seed=0, depth=4):
    spec = uniform_spec(depth, 2, 3, width=8, activation="tanh", projector="mlp",
                        projector_hidden=8, embedding_dim=4,
                        loss=LossConfig(), mode="deinforeg")
    net = build(spec, RngState(seed).derive("init"))
    net.configure_optimizers(0.1, 0.9)
    return net


def _epoch_batches(seed, epochs=2):
    ds = standardize(gen_blobs(3, 40, 2, 6.0, RngState(seed, "ds")))
    rng = RngState(seed)
    return [list(batches(ds, "train", 16, True, rng.derive("shuffle", e)))
            for e in range(epochs)]


def _train_sequential(net, epoch_batches):
    for batch_list in epoch_batches:
        for x, y in batch_list:
            train_step_deinforeg(net, x, y)


@pytest.mark.parametrize("workers", [1, 2, 4])
def test_pipelined_matches_sequential_bitwise(workers):
    data = _epoch_batches(3)
    seq = _small_net(11)
    _train_sequential(seq, data)
    pipe = _small_net(11)
    stats = run_pipelined(pipe, data, workers=workers)
    assert stats.workers == min(workers, 4)
    for (na, aa), (nb, ab) in zip(seq.state_arrays(), pipe.state_arrays()):
        assert na == nb
        assert np.array_equal(aa, ab), f"{na} differs with workers={workers}"


def test_partition_contiguous():
    assert [list(r) for r in partition_contiguous(4, 2)] == [[0, 1], [2, 3]]
    assert [list(r) for r in partition_contiguous(5, 2)] == [[0, 1, 2], [3, 4]]
    assert [list(r) for r in partition_contiguous(2, 8)] == [[0], [1]]


def test_worker_failure_aborts_with_diagnostic():
    net = _small_net(12)
    bad = Matrix.ones(16, 5)  # wrong input width: the first worker raises
    y = one_hot(np.zeros(16, dtype=int), 3)
    with pytest.raises(RuntimeError, match="pipeline worker"):
        run_pipelined(net, [[(bad, y)]], workers=2)


def test_run_pipelined_requires_decoupled_mode():
    spec = uniform_spec(2, 2, 3, width=4, mode="bp")
    net = build(spec, RngState(0))
    net.configure_optimizers(0.1)
    with pytest.raises(ValueError, match="decoupled"):
        run_pipelined(net, [[]], workers=1)
