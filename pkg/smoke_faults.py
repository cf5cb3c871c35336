"""Smoke battery for the remaining fault families."""
import numpy as np

from overmon.simnet.scenario import FaultKind, FaultSpec, Scenario, Workload
from overmon.simnet.engine import Simulation


def run(kind, target, onset=150, duration=300, n=2, rate=None, svc=None,
        tx_quota=None, drain=False, seed=7, topo_seed=None):
    kw = {}
    if rate is not None:
        kw["workload"] = Workload(msg_rate=rate, duration=duration)
    else:
        kw["workload"] = Workload(duration=duration)
    if svc is not None:
        kw["service_pkts_per_tick"] = svc
    if tx_quota is not None:
        kw["quotas"] = {"transmitter": tx_quota, "forwarder": 32e6, "receiver": 2e9}
    sc = Scenario(
        name=f"smoke-{kind.value}", seed=seed, node_count=n, topology_seed=topo_seed,
        fault=FaultSpec(kind=kind, target=target, onset=onset), **kw)
    sim = Simulation(sc)
    res = sim.run(drain=drain)
    return sim, res


def series(res, nid, name):
    return res.history[nid][:, res.registries[nid].local_index(name)]


def report(tag, sim, res, rx):
    lat = series(res, rx, "rx_latency_p99_s")
    wait = series(res, 0, "buf_wait_mean_s")
    den = series(res, 0, "buf_denied_pkts")
    onset = sim.scenario.fault.onset
    first_bad = next((t for t, v in enumerate(lat) if v > 0.8), None)
    print(f"[{tag}] p99 pre {lat[onset-20:onset].mean():.4f} post-max {lat[onset:].max():.1f} "
          f"first>0.8 t={first_bad} (onset {onset})")
    print(f"[{tag}] tx wait post-max {wait[onset:].max():.2f} denied post-max {den[onset:].max():.0f}")
    print(f"[{tag}] lost={res.total_lost_pkts()} maxrun={res.max_missing_run()} "
          f"nacks={sum(1 for e in res.event_log if e['kind'] == 'nack')} "
          f"sockdrops={sum(e.get('pkts', 0) for e in res.event_log if e['kind'] == 'sock_drop')}")


# ---- A bitwise vs no-fault baseline ----
sim_a, res_a = run(FaultKind.A, 0)
sc_base = Scenario(name="smoke-A", seed=7, node_count=2, workload=Workload(duration=300))
res_b = Simulation(sc_base).run()
same_hist = all(np.array_equal(res_a.history[n], res_b.history[n]) for n in res_a.history)
same_log = res_a.event_log == res_b.event_log
same_lat = all(np.array_equal(np.asarray(res_a.latency[k]), np.asarray(res_b.latency[k]))
               for k in res_a.latency)
print(f"[A] bitwise windows={same_hist} event_log={same_log} latency={same_lat}")

# ---- B: slow receiver CPU (x8) ----
sim, res = run(FaultKind.B, 1)
report("B", sim, res, 1)
print(f"[B] rx cpu_capacity post {series(res, 1, 'cpu_capacity_pkts')[200]:.0f} "
      f"sock_queue max {series(res, 1, 'sock_queue_pkts').max():.0f} "
      f"rx sockdrop gauge sum {series(res, 1, 'sock_dropped_pkts').sum():.0f}")

# ---- C: slow transmitter CPU (x8) ----
sim, res = run(FaultKind.C, 0)
report("C", sim, res, 1)
print(f"[C] tx cpu_capacity post {series(res, 0, 'cpu_capacity_pkts')[200]:.0f} "
      f"tx sent post {series(res, 0, 'tx_sent_pkts')[200:].mean():.0f}")

# ---- E: receiver quota cut, two-node ----
sim, res = run(FaultKind.E, 1)
report("E2", sim, res, 1)
print(f"[E2] rx quota post {series(res, 1, 'buf_quota_bytes')[200]:.0f} "
      f"admitted post {series(res, 0, 'buf_admitted_pkts')[200:].mean():.0f}")

# ---- D': bursty loss on rx inbound link ----
sim, res = run(FaultKind.DP, 1, duration=220, onset=150)
report("D'", sim, res, 1)
runs = series(res, 1, "rx_gap_max_run")
print(f"[D'] gauge max gap run {runs.max():.0f} retrans sum {series(res, 0, 'tx_retrans_pkts').sum():.0f}")

# ---- ten-node E cascade ----
from overmon.simnet.topology import Role, generate_tree

topo = generate_tree(10, seed=11)
deep = [r for r in topo.receivers() if len(topo.path_to_root(r)) > 2]
target = deep[0] if deep else topo.receivers()[0]
print(f"[E10] tree edges {[(n, topo.parent_of(n)) for n in topo.node_ids if n]} target {target}")
sim, res = run(FaultKind.E, target, n=10, rate=3000, svc=4000, tx_quota=512e6,
               topo_seed=11, duration=300, onset=150)
report("E10", sim, res, target)
sib = [r for r in topo.receivers() if r != target][0]
print(f"[E10] sibling {sib} p99 post-max {series(res, sib, 'rx_latency_p99_s')[150:].max():.1f} "
      f"fw held max {max(series(res, f, 'buf_held_bytes').max() for f in topo.node_ids if topo.role_of(f) is Role.FORWARDER):.2e}")
