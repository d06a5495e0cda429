"""Pipeline scheduling: a discrete-event simulator and a real executor.

The simulator compares three per-iteration regimes on abstract stage costs:
end-to-end backprop (strictly sequential on one device), naive model
parallelism (the identical dependency chain spread over devices, so no
overlap), and the decoupled schedule, where a device starts its module's
forward as soon as the upstream output arrives and immediately runs its own
loss/backward/update while downstream devices proceed.

The executor trains a decoupled network for real on worker threads joined
by bounded FIFO queues of detached activations. Because a module's update
depends only on its own state and its ordered input stream, the pipelined
run is bitwise identical to the sequential one for any worker count.
"""

from __future__ import annotations

import csv
import queue
import threading
import time
from dataclasses import dataclass
from typing import Optional, Sequence

from .network import Network, build_module_step
from .autodiff import Graph
from .tensor import Matrix

SIM_MODES = ("bp", "nmp", "deinforeg")
STAGES = ("FW", "LOSS", "BW", "UP", "XFER")

# Stage durations read off the four-module reference timing diagram:
# forward 1, loss 1, backward 2, update 1 per module, instant transfers.
# They give makespan 17 for backprop and 8 for the decoupled schedule.
FIGURE_STAGE_COSTS = None  # set below, after StageCost is defined


@dataclass(frozen=True)
class StageCost:
    """Per-module stage durations plus the device-to-device transfer time."""

    forward: tuple[float, ...]
    loss: tuple[float, ...]
    backward: tuple[float, ...]
    update: tuple[float, ...]
    transfer: float = 0.0

    def __post_init__(self):
        n = len(self.forward)
        if n == 0:
            raise ValueError("StageCost: needs at least one module")
        if not (len(self.loss) == len(self.backward) == len(self.update) == n):
            raise ValueError("StageCost: per-module duration lists must have equal length")
        for seq in (self.forward, self.loss, self.backward, self.update, (self.transfer,)):
            if any(d < 0 for d in seq):
                raise ValueError("StageCost: durations must be >= 0")

    @property
    def modules(self) -> int:
        return len(self.forward)

    @classmethod
    def uniform(cls, modules: int, forward: float, loss: float, backward: float,
                update: float, transfer: float = 0.0) -> "StageCost":
        return cls((forward,) * modules, (loss,) * modules, (backward,) * modules,
                   (update,) * modules, transfer)


FIGURE_STAGE_COSTS = StageCost.uniform(4, forward=1.0, loss=1.0, backward=2.0,
                                       update=1.0, transfer=0.0)


@dataclass(frozen=True)
class ScheduleEvent:
    device: int
    stage: str
    module: int
    batch: int
    start: float
    end: float

    def __post_init__(self):
        if self.end < self.start:
            raise ValueError("ScheduleEvent: end before start")


def _device_of(module: int, devices: int, mode: str) -> int:
    if mode == "bp":
        return 0
    return module % devices


def simulate(mode: str, costs: StageCost, devices: int, batches: int = 1
             ) -> tuple[float, list[ScheduleEvent]]:
    """Earliest-start schedule for one of the three regimes.

    Returns the makespan and the full event list. Transfers are modeled as
    latency on a serialized per-link lane (lane ids start at `devices`);
    same-device handoffs are free.
    """
    if mode not in SIM_MODES:
        raise ValueError(f"mode must be one of {SIM_MODES}")
    if devices < 1:
        raise ValueError("devices must be >= 1")
    if batches < 1:
        raise ValueError("batches must be >= 1")
    n = costs.modules
    events: list[ScheduleEvent] = []
    dev_free = [0.0] * devices
    link_free: dict[tuple[int, int], float] = {}
    link_lane: dict[tuple[int, int], int] = {}

    def run(device: int, stage: str, module: int, batch: int, ready: float,
            duration: float) -> float:
        start = max(ready, dev_free[device])
        end = start + duration
        dev_free[device] = end
        events.append(ScheduleEvent(device, stage, module, batch, start, end))
        return end

    def transfer(src: int, dst: int, module: int, batch: int, ready: float) -> float:
        if src == dst or costs.transfer == 0.0:
            return ready
        key = (min(src, dst), max(src, dst))
        if key not in link_lane:
            link_lane[key] = devices + len(link_lane)
        start = max(ready, link_free.get(key, 0.0))
        end = start + costs.transfer
        link_free[key] = end
        events.append(ScheduleEvent(link_lane[key], "XFER", module, batch, start, end))
        return end

    if mode in ("bp", "nmp"):
        # One strict chain per batch: FW_1..FW_L, LOSS, BW_L..BW_1, UP_L..UP_1.
        t = 0.0
        for b in range(batches):
            prev_dev = None
            for l in range(n):
                d = _device_of(l, devices, mode)
                if prev_dev is not None:
                    t = transfer(prev_dev, d, l, b, t)
                t = run(d, "FW", l, b, t, costs.forward[l])
                prev_dev = d
            d_last = _device_of(n - 1, devices, mode)
            t = run(d_last, "LOSS", n - 1, b, t, costs.loss[n - 1])
            prev_dev = d_last
            for l in range(n - 1, -1, -1):
                d = _device_of(l, devices, mode)
                t = transfer(prev_dev, d, l, b, t)
                t = run(d, "BW", l, b, t, costs.backward[l])
                prev_dev = d
            for l in range(n - 1, -1, -1):
                d = _device_of(l, devices, mode)
                t = run(d, "UP", l, b, t, costs.update[l])
    else:
        # Decoupled: FW_l(b) waits for FW_{l-1}(b)'s arrival; each device then
        # runs its own LOSS/BW/UP immediately, overlapping with downstream.
        arrival = [[0.0] * n for _ in range(batches)]
        for b in range(batches):
            for l in range(n):
                d = _device_of(l, devices, mode)
                ready = arrival[b][l]
                fw_end = run(d, "FW", l, b, ready, costs.forward[l])
                if l + 1 < n:
                    nxt = _device_of(l + 1, devices, mode)
                    arrival[b][l + 1] = transfer(d, nxt, l + 1, b, fw_end)
                run(d, "LOSS", l, b, fw_end, costs.loss[l])
                run(d, "BW", l, b, dev_free[d], costs.backward[l])
                run(d, "UP", l, b, dev_free[d], costs.update[l])

    makespan = max((e.end for e in events), default=0.0)
    return makespan, events


def emit_gantt(events: Sequence[ScheduleEvent], path: str) -> None:
    """Write the event list as a CSV trace sorted by start time."""
    ordered = sorted(events, key=lambda e: (e.start, e.device, e.module, e.batch, e.stage))
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["device", "stage", "module", "batch", "start", "end"])
        for e in ordered:
            writer.writerow([e.device, e.stage, e.module, e.batch, repr(e.start), repr(e.end)])


def parse_gantt(path: str) -> list[ScheduleEvent]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != ["device", "stage", "module", "batch", "start", "end"]:
            raise ValueError(f"{path}: unexpected trace header {header}")
        return [ScheduleEvent(int(d), s, int(m), int(b), float(t0), float(t1))
                for d, s, m, b, t0, t1 in reader]


# ---------------------------------------------------------------------------
# real multi-worker executor


@dataclass(frozen=True)
class HandoffPacket:
    """A detached activation batch crossing a worker boundary."""

    batch_index: int
    activation: Matrix
    labels: Matrix


@dataclass(frozen=True)
class PipelineStats:
    epoch_seconds: list[float]
    batches_per_epoch: int
    workers: int

    @property
    def total_seconds(self) -> float:
        return sum(self.epoch_seconds)


_SENTINEL = None


def _put_with_abort(q: "queue.Queue", item, abort: threading.Event) -> bool:
    """Blocking put that gives up if the run has been aborted."""
    while not abort.is_set():
        try:
            q.put(item, timeout=0.1)
            return True
        except queue.Full:
            continue
    return False


def partition_contiguous(n_modules: int, workers: int) -> list[range]:
    """Split module indices into `workers` contiguous, near-equal chunks."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    workers = min(workers, n_modules)
    base, extra = divmod(n_modules, workers)
    out, start = [], 0
    for w in range(workers):
        size = base + (1 if w < extra else 0)
        out.append(range(start, start + size))
        start += size
    return out


def _worker_loop(net: Network, module_range: range, in_q: "queue.Queue",
                 out_q: Optional["queue.Queue"], abort: threading.Event,
                 errors: list, pad_seconds: float) -> None:
    modules = [net.modules[l] for l in module_range]
    try:
        while True:
            try:
                packet = in_q.get(timeout=0.1)
            except queue.Empty:
                if abort.is_set():
                    return
                continue
            if packet is _SENTINEL:
                if out_q is not None:
                    _put_with_abort(out_q, _SENTINEL, abort)
                return
            # Forward all owned modules, hand the detached output downstream,
            # then run losses/backward/update while downstream proceeds.
            h_val, y = packet.activation, packet.labels
            g = Graph()
            steps = []
            for module in modules:
                step = build_module_step(g, module, h_val, y)
                steps.append(step)
                h_val = step.encoder_out.value
            if out_q is not None:
                _put_with_abort(out_q, HandoffPacket(packet.batch_index, h_val, y), abort)
            for module, step in zip(modules, steps):
                grads = g.backward(step.nodes.module_total)
                module.opt.step({id(p): step.binder.grad_of(grads, p)
                                 for p in module.all_params()})
                if pad_seconds > 0:
                    time.sleep(pad_seconds)
    except BaseException as exc:  # propagate any worker failure to the driver
        errors.append((module_range, exc))
        abort.set()


def run_pipelined(net: Network, epoch_batches: Sequence[Sequence[tuple[Matrix, Matrix]]],
                  workers: int, queue_capacity: int = 2, pad_seconds: float = 0.0
                  ) -> PipelineStats:
    """Train a decoupled network with contiguous module groups on worker
    threads. Every module sees batches in arrival order, so parameters are
    bitwise identical to the sequential run for any worker count.

    `epoch_batches` is a list of epochs, each an ordered batch list.
    `pad_seconds` adds synthetic per-module compute to each step, for
    throughput experiments.
    """
    if net.mode != "deinforeg":
        raise ValueError("run_pipelined requires a decoupled-mode network")
    if queue_capacity < 1:
        raise ValueError("queue_capacity must be >= 1")
    ranges = partition_contiguous(net.depth, workers)
    epoch_seconds = []
    n_batches = len(epoch_batches[0]) if epoch_batches else 0
    for batch_list in epoch_batches:
        t0 = time.perf_counter()
        queues = [queue.Queue(maxsize=queue_capacity) for _ in ranges]
        abort = threading.Event()
        errors: list = []
        threads = []
        for w, rng_ in enumerate(ranges):
            out_q = queues[w + 1] if w + 1 < len(ranges) else None
            t = threading.Thread(target=_worker_loop,
                                 args=(net, rng_, queues[w], out_q, abort, errors, pad_seconds),
                                 name=f"pipeline-worker-{w}", daemon=True)
            t.start()
            threads.append(t)
        try:
            for b, (x, y) in enumerate(batch_list):
                if not _put_with_abort(queues[0], HandoffPacket(b, x, y), abort):
                    break
            _put_with_abort(queues[0], _SENTINEL, abort)
        finally:
            for t in threads:
                t.join()
        if errors:
            rng_, exc = errors[0]
            raise RuntimeError(
                f"pipeline worker for modules {list(rng_)} failed: {exc!r}") from exc
        epoch_seconds.append(time.perf_counter() - t0)
    return PipelineStats(epoch_seconds, n_batches, len(ranges))
