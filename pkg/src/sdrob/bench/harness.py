"""Measurement harness: switch latency, rollback vs restart, throughput, RSS.

Latency metrics collect at least 30 samples and always report the
standard deviation next to the mean. Throughput drives a built-in load
generator (no external tooling): a fixed-seed Zipfian key popularity
with a 95/5 read/write mix, against both the sandboxed server and the
`--no-domains` baseline.
"""

import os
import random
import socket
import subprocess
import sys
import threading
import time

import psutil

from ..api import InitOptions, NO_HEAP_MERGE
from ..config import Config
from ..runtime import Runtime
from .records import BenchRecord, summarize

_EXEC_OPTS = (InitOptions.EXECUTION_DOMAIN | InitOptions.ACCESSIBLE_DOMAIN
              | InitOptions.RETURN_HERE)

ZIPF_S = 0.99
ZIPF_SEED = 20240901


# -- domain switch latency ------------------------------------------------------


def bench_switch_latency(config: Config, iters: int = 1_000_000,
                         samples: int = 50) -> list[BenchRecord]:
    """Enter+exit round trip; on hardware also the policy-write share."""
    rt = Runtime(config)
    api = rt.api
    udi = 42
    assert api.init(udi, _EXEC_OPTS, heap_size=65536).ok
    records = [_measure_switch(rt, udi, iters, samples,
                               "switch_round_trip", rt.backend_name)]
    if rt.backend_name == "hardware":
        # identical round trip with the policy write suppressed: the
        # difference is the share spent updating the rights register
        monitor = rt.monitor
        saved = monitor._apply_active_policy
        monitor._apply_active_policy = lambda tds: None
        try:
            quiet = _measure_switch(rt, udi, iters, samples,
                                    "switch_no_policy_write", rt.backend_name)
        finally:
            monitor._apply_active_policy = saved
        records.append(quiet)
        share = 100.0 * max(records[0].mean - quiet.mean, 0.0) / records[0].mean
        records.append(BenchRecord(metric="switch_policy_write_share",
                                   backend=rt.backend_name, param="-",
                                   samples=records[0].samples, mean=share,
                                   stddev=0.0, unit="percent"))
    api.destroy(udi, NO_HEAP_MERGE)
    rt.close()
    return records


def _measure_switch(rt: Runtime, udi: int, iters: int, samples: int,
                    metric: str, backend: str) -> BenchRecord:
    api = rt.api
    per_sample = max(1, iters // samples)
    values = []
    for _ in range(samples):
        t0 = time.perf_counter_ns()
        for _ in range(per_sample):
            api.enter(udi)
            api.exit()
        dt = time.perf_counter_ns() - t0
        values.append(dt / per_sample / 1000.0)  # us per round trip
    return summarize(metric, backend, f"iters={per_sample * samples}",
                     values, "us")


# -- rollback latency vs process restart ---------------------------------------------


def bench_rollback_latency(config: Config, scrub: bool = False,
                           faults: int = 1000,
                           restarts: int = 30) -> list[BenchRecord]:
    """Fault-to-service-restored latency, against full process restart."""
    from ..demo.kv import KvClient, KvServer

    cfg = Config(backend=config.backend, stack_size=config.stack_size,
                 heap_size=config.heap_size, scrub_on_destroy=scrub,
                 force_pipe_engine=config.force_pipe_engine)
    rt = Runtime(cfg)
    server = KvServer(rt, workers=1)
    server.start()
    seed = KvClient(server.host, server.port)
    seed.set(b"warm", b"x" * 512)
    seed.close()
    modes = ("heap-overflow", "stack-smash", "root-write", "guard-overrun")
    for i in range(faults):
        client = KvClient(server.host, server.port)
        client.crash(modes[i % len(modes)])
        client.expect_close()
        client.close()
    # wait for the last rollback to be recorded
    deadline = time.time() + 10
    while len(server.rollback_latencies_ns) < faults and time.time() < deadline:
        time.sleep(0.01)
    latencies_us = [ns / 1000.0 for ns in server.rollback_latencies_ns[:faults]]
    server.stop()
    rt.close()
    records = []
    if latencies_us:
        records.append(summarize("rollback_latency", cfg.backend or "auto",
                                 f"scrub={int(scrub)}", latencies_us, "us"))
    restart_us = _measure_restart(cfg, restarts)
    records.append(summarize("restart_latency", cfg.backend or "auto",
                             f"n={restarts}", restart_us, "us"))
    if latencies_us:
        ratio = records[1].mean / records[0].mean if records[0].mean else 0.0
        records.append(BenchRecord(metric="restart_over_rollback",
                                   backend=cfg.backend or "auto",
                                   param=f"scrub={int(scrub)}",
                                   samples=len(latencies_us), mean=ratio,
                                   stddev=0.0, unit="x"))
    return records


def _spawn_server(extra: list[str], env_backend: str | None = None,
                  timeout: float = 30.0):
    env = dict(os.environ)
    if env_backend:
        env["SDROB_BACKEND"] = env_backend
    proc = subprocess.Popen(
        [sys.executable, "-m", "sdrob.demo.cli", "kv", "--port", "0", *extra],
        stdout=subprocess.PIPE, stderr=subprocess.DEVNULL, env=env, text=True)
    line = proc.stdout.readline()
    deadline = time.time() + timeout
    while "listening on" not in line:
        if time.time() > deadline or proc.poll() is not None:
            proc.kill()
            raise RuntimeError(f"server failed to start: {line!r}")
        line = proc.stdout.readline()
    hostport = line.split("listening on", 1)[1].split()[0]
    host, port = hostport.rsplit(":", 1)
    return proc, host, int(port)


def _wait_ready(host: str, port: int, timeout: float = 30.0) -> None:
    deadline = time.time() + timeout
    while True:
        try:
            with socket.create_connection((host, port), timeout=0.5):
                return
        except OSError:
            if time.time() > deadline:
                raise
            time.sleep(0.002)


def _measure_restart(config: Config, restarts: int) -> list[float]:
    values = []
    for _ in range(max(restarts, 1)):
        t0 = time.perf_counter_ns()
        proc, host, port = _spawn_server([], env_backend=config.backend or None)
        _wait_ready(host, port)
        values.append((time.perf_counter_ns() - t0) / 1000.0)
        proc.kill()
        proc.wait()
    return values


# -- throughput -----------------------------------------------------------------------


def _zipf_chooser(keys: list[bytes], rng: random.Random):
    weights = [1.0 / (rank ** ZIPF_S) for rank in range(1, len(keys) + 1)]
    total = 0.0
    cum = []
    for w in weights:
        total += w
        cum.append(total)
    def choose() -> bytes:
        return rng.choices(keys, cum_weights=cum, k=1)[0]
    return choose


def _drive_load(host: str, port: int, payload: int, duration: float,
                clients: int, keys_n: int = 256) -> list[float]:
    """Returns per-window throughput samples (ops/sec)."""
    from ..demo.kv import KvClient

    keys = [b"k%05d" % i for i in range(keys_n)]
    value = bytes(payload)
    loader = KvClient(host, port)
    for key in keys:
        loader.set(key, value)
    loader.close()

    counters = [0] * clients
    stop = threading.Event()

    def client_main(idx: int):
        rng = random.Random(ZIPF_SEED + idx)
        choose = _zipf_chooser(keys, rng)
        client = KvClient(host, port)
        try:
            while not stop.is_set():
                key = choose()
                if rng.random() < 0.05:
                    client.set(key, value)
                else:
                    client.get(key)
                counters[idx] += 1
        except (ConnectionError, OSError):
            pass
        finally:
            client.close()

    threads = [threading.Thread(target=client_main, args=(i,), daemon=True)
               for i in range(clients)]
    t0 = time.perf_counter()
    for t in threads:
        t.start()
    window = 0.1
    windows = []
    last_ops = 0
    while time.perf_counter() - t0 < duration:
        time.sleep(window)
        now_ops = sum(counters)
        windows.append((now_ops - last_ops) / window)
        last_ops = now_ops
    stop.set()
    for t in threads:
        t.join(timeout=5)
    # drop the warmup window
    return windows[1:] if len(windows) > 2 else windows


def bench_throughput(config: Config, workers: int = 1, payload: int = 1024,
                     duration: float = 3.0, clients: int = 4) -> list[BenchRecord]:
    records = []
    results = {}
    for label, extra in (("sandboxed", ["--workers", str(workers)]),
                         ("baseline", ["--workers", str(workers), "--no-domains"])):
        proc, host, port = _spawn_server(extra, env_backend=config.backend or None)
        try:
            _wait_ready(host, port)
            windows = _drive_load(host, port, payload, duration, clients)
            # saturation probe: more clients should move the needle
            probe = _drive_load(host, port, payload, 0.4, clients + 2)
            base_rate = sum(windows) / len(windows)
            probe_rate = sum(probe) / len(probe) if probe else 0.0
            if probe_rate < base_rate * 1.03 and probe_rate > 0:
                print(f"warning: client side may be the bottleneck for "
                      f"{label} (probe {probe_rate:.0f} vs {base_rate:.0f} ops/s)",
                      file=sys.stderr)
            results[label] = base_rate
            records.append(summarize(f"throughput_{label}",
                                     config.backend or "auto",
                                     f"workers={workers},payload={payload}",
                                     windows, "ops/s"))
        finally:
            proc.kill()
            proc.wait()
    if results.get("baseline"):
        overhead = 100.0 * (results["baseline"] - results["sandboxed"]) \
            / results["baseline"]
        records.append(BenchRecord(metric="throughput_overhead",
                                   backend=config.backend or "auto",
                                   param=f"workers={workers},payload={payload}",
                                   samples=records[0].samples, mean=overhead,
                                   stddev=0.0, unit="percent"))
    return records


# -- memory ------------------------------------------------------------------------------


def _load_items(host: str, port: int, items: int, payload: int) -> None:
    """Pipelined SET load; responses are drained as batches complete."""
    from ..demo.kv import KvClient

    client = KvClient(host, port)
    value = bytes(payload)
    batch = bytearray()
    owed = 0  # bytes of b"OK\n" responses not yet read

    def drain(expected: int):
        nonlocal owed
        owed += expected
        while owed > 0:
            data = client.sock.recv(min(owed, 1 << 20))
            if not data:
                raise RuntimeError("server closed during load")
            owed -= len(data)

    pending = 0
    for i in range(items):
        batch += b"SET item%07d %d\n" % (i, payload) + value + b"\n"
        pending += 1
        if len(batch) >= 128 * 1024:
            client.sock.sendall(batch)
            batch.clear()
            drain(pending * 3)
            pending = 0
    if batch:
        client.sock.sendall(batch)
        drain(pending * 3)
    client.close()


def bench_memory(config: Config, items: int = 100_000, payload: int = 1024,
                 reps: int = 1, workers: int = 1) -> list[BenchRecord]:
    rss = {"sandboxed": [], "baseline": []}
    for _ in range(max(reps, 1)):
        for label, extra in (("sandboxed", ["--workers", str(workers)]),
                             ("baseline", ["--workers", str(workers),
                                           "--no-domains"])):
            proc, host, port = _spawn_server(extra,
                                             env_backend=config.backend or None)
            try:
                _wait_ready(host, port)
                _load_items(host, port, items, payload)
                time.sleep(0.3)
                rss[label].append(psutil.Process(proc.pid).memory_info().rss / 1024.0)
            finally:
                proc.kill()
                proc.wait()
    records = [
        summarize("max_rss_sandboxed", config.backend or "auto",
                  f"items={items},payload={payload}", rss["sandboxed"], "KiB"),
        summarize("max_rss_baseline", config.backend or "auto",
                  f"items={items},payload={payload}", rss["baseline"], "KiB"),
    ]
    deltas = [100.0 * (a - b) / b for a, b in zip(rss["sandboxed"], rss["baseline"])]
    records.append(summarize("rss_overhead", config.backend or "auto",
                             f"items={items},payload={payload}", deltas,
                             "percent"))
    return records
