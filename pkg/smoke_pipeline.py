"""Scratch: exercise the pipeline on the criterion scenarios."""
import sys
import time

import numpy as np

from overmon.pipeline import run_pipeline
from overmon.collector import ResourceKind
from overmon.simnet import (FaultKind, FaultSpec, MonitoringConfig, Scenario,
                            Workload, run_scenario)


def is_txbuf(pid):
    return pid.node == 0 and pid.resource_kind is ResourceKind.MEMORY


def show(tag, scn, verbose=True):
    t0 = time.time()
    result, pipe = run_pipeline(scn)
    dt = time.time() - t0
    print(f"=== {tag} ({dt:.1f}s) ===")
    if not pipe.triggers:
        print("  no trigger")
        return result, pipe
    trig = pipe.triggers[0]
    print(f"  trigger tick={trig.tick} node={trig.node} obs={trig.observed:.3f}")
    if not pipe.analyses:
        print("  no analysis")
        return result, pipe
    rec = pipe.analyses[0]
    prov = rec.report.solver_provenance
    print(f"  target={rec.target.node}:{rec.target.name} k={len(rec.params)} "
          f"dups={len(rec.dropped_duplicate)} rows={rec.rows_used}")
    print(f"  solver={prov.method} attempts={[(a.method, a.iterations, a.converged) for a in prov.attempts]}")
    print(f"  payloads={rec.gabp_payload_bytes}")
    print(f"  bytes_out={rec.bytes_out} total={rec.bytes_total}")
    print(f"  pred_corr={rec.pred_actual_corr:.3f} call={rec.fault_call.kinds} node={rec.fault_call.node}")
    gls9 = sum(is_txbuf(pid) for pid, _, _ in rec.report.ranking[:9])
    ols5 = sum(is_txbuf(pid) for pid, _, _ in rec.ols_ranking[:5])
    print(f"  txbuf: GLS {gls9}/9  OLS {ols5}/5")
    if verbose:
        print("  GLS top-10:")
        for pos, (pid, mag, w) in enumerate(rec.report.ranking, 1):
            print(f"   {pos:2d} {pid.node}:{pid.name:<24} {w:+.4f}")
        print("  OLS top-5:")
        for pos, (pid, mag, w) in enumerate(rec.ols_ranking[:5], 1):
            print(f"   {pos:2d} {pid.node}:{pid.name:<24} {w:+.4f}")
    if pipe.actions:
        a = pipe.actions[0]
        print(f"  action node={a.node} {a.old_quota:.3g}->{a.new_quota:.3g} "
              f"pred={a.predicted_change:+.4f} applied={a.applied}")
    return result, pipe


if "lam" in sys.argv:
    for lam in (0.9, 0.92, 0.95):
        two = Scenario(name="two", seed=101, node_count=2,
                       monitoring=MonitoringConfig(shrinkage=lam),
                       fault=FaultSpec(kind=FaultKind.F, target=0, onset=150))
        show(f"two-node F lam={lam}", two, verbose=True)

if "idle" in sys.argv:
    from overmon.collector import filter_constant
    base = Scenario(name="idle", seed=101, node_count=2)
    res = run_scenario(base)
    for nid, win in sorted(res.windows.items()):
        kept, dropped = filter_constant(win)
        total = len(kept) + len(dropped)
        print(f"node {nid}: registered={total} kept={len(kept)} "
              f"dropped={len(dropped)} frac={len(dropped)/total:.2f}")
        print("   kept:", ", ".join(p.name for p in kept))

if "seeds" in sys.argv:
    lam = float(sys.argv[sys.argv.index("seeds") + 1]) if len(sys.argv) > sys.argv.index("seeds") + 1 else 0.92
    ok_t = ok_g = ok_cmp = ok_conv = 0
    n = 20
    for i in range(n):
        two = Scenario(name="two", seed=1000 + i, node_count=2,
                       monitoring=MonitoringConfig(shrinkage=lam),
                       fault=FaultSpec(kind=FaultKind.F, target=0, onset=150))
        t0 = time.time()
        result, pipe = run_pipeline(two)
        dt = time.time() - t0
        if not pipe.analyses:
            print(f"seed {two.seed}: NO ANALYSIS")
            continue
        rec = pipe.analyses[0]
        gls9 = sum(is_txbuf(pid) for pid, _, _ in rec.report.ranking[:9])
        ols5 = sum(is_txbuf(pid) for pid, _, _ in rec.ols_ranking[:5])
        prov = rec.report.solver_provenance
        conv = prov.method == "gabp"
        trig = pipe.triggers[0].tick <= 160
        ok_t += trig
        ok_g += gls9 >= 6
        ok_cmp += (gls9 / 9.0) >= (ols5 / 5.0)
        ok_conv += conv
        mx = max(rec.bytes_out.values())
        print(f"seed {two.seed}: trig={pipe.triggers[0].tick} gls9={gls9} ols5={ols5} "
              f"conv={conv} iters={prov.attempts[0].iterations} maxout={mx} {dt:.1f}s")
    print(f"summary: trig {ok_t}/{n} gls>=6 {ok_g}/{n} gls>=ols {ok_cmp}/{n} conv {ok_conv}/{n}")

def brief(tag, scn, want_node=None):
    t0 = time.time()
    result, pipe = run_pipeline(scn)
    dt = time.time() - t0
    if not pipe.analyses:
        trig = pipe.triggers[0] if pipe.triggers else None
        print(f"{tag}: NO ANALYSIS trigger={trig and (trig.tick, trig.node)} {dt:.1f}s")
        return
    trig = pipe.triggers[0]
    rec = pipe.analyses[0]
    prov = rec.report.solver_provenance
    top = rec.report.ranking[0][0]
    own = "" if want_node is None else ("  TOP-OK" if top.node == want_node else "  TOP-MISS")
    top3 = ", ".join(f"{p.node}:{p.name}{w:+.2f}" for p, _, w in rec.report.ranking[:3])
    print(f"{tag}: trig@{trig.node} t={trig.tick} target={rec.target.node}:{rec.target.name} "
          f"k={len(rec.params)} {prov.method}/{prov.attempts[0].iterations}it "
          f"call={rec.fault_call.kinds}@{rec.fault_call.node} gaps={rec.gap_events:.0f}/"
          f"run{rec.gap_max_run:.0f} {dt:.1f}s{own}")
    print(f"    top3: {top3}")


if "ten" in sys.argv:
    base = Scenario(name="ten", seed=202, node_count=10, topology_seed=7,
                    target_metric="trigger",
                    workload=Workload(msg_rate=3000, msg_size=8192, duration=260),
                    service_pkts_per_tick=4000,
                    quotas={"transmitter": 512e6, "forwarder": 32e6, "receiver": 2e9})
    topo = base.build_topology()
    roles = {nid: topo.role_of(nid).value for nid in topo.node_ids}
    print("ten-node roles:", roles)
    rx = sorted(topo.receivers())
    deep = max(rx, key=lambda n: len(topo.path_to_root(n)))
    print("receivers:", rx, "deep:", deep, "path:", topo.path_to_root(deep))
    for r in rx:
        brief(f"E@{r}", base.replace(fault=FaultSpec(kind=FaultKind.E, target=r, onset=150)), want_node=r)
    brief("F@0", base.replace(fault=FaultSpec(kind=FaultKind.F, target=0, onset=150)), want_node=0)
    brief("C@0", base.replace(fault=FaultSpec(kind=FaultKind.C, target=0, onset=150)))
    for r in rx[:1]:
        brief(f"B@{r}", base.replace(fault=FaultSpec(kind=FaultKind.B, target=r, onset=150)))
        brief(f"D@{r}", base.replace(fault=FaultSpec(kind=FaultKind.D, target=r, onset=150)))
        brief(f"D'@{r}", base.replace(fault=FaultSpec(kind=FaultKind.DP, target=r, onset=150)))
    show(f"ten-node E@{deep} detail", base.replace(fault=FaultSpec(kind=FaultKind.E, target=deep, onset=150)))

if "sweep" in sys.argv:
    base = Scenario(name="ten", seed=202, node_count=10, topology_seed=7,
                    target_metric="trigger",
                    workload=Workload(msg_rate=3000, msg_size=8192, duration=260),
                    service_pkts_per_tick=4000,
                    quotas={"transmitter": 512e6, "forwarder": 32e6, "receiver": 2e9})
    for q in [22e6, 24e6, 26e6, 28e6]:
        brief(f"E@7 q={q/1e6:.0f}MB",
              base.replace(fault=FaultSpec(kind=FaultKind.E, target=7, onset=150, magnitude=q)),
              want_node=7)
    for q in [18e6, 22e6, 25e6, 28e6]:
        brief(f"F@0 q={q/1e6:.0f}MB",
              base.replace(fault=FaultSpec(kind=FaultKind.F, target=0, onset=150, magnitude=q)),
              want_node=0)
    for d in [1.6, 2.0, 3.0]:
        brief(f"B@7 div={d}",
              base.replace(fault=FaultSpec(kind=FaultKind.B, target=7, onset=150, magnitude=d)))

if "pool" in sys.argv:
    scn = Scenario(name="ten", seed=202, node_count=10, topology_seed=7,
                   target_metric="trigger",
                   workload=Workload(msg_rate=3000, msg_size=8192, duration=260),
                   service_pkts_per_tick=4000,
                   quotas={"transmitter": 512e6, "forwarder": 32e6, "receiver": 2e9})
    from overmon.simnet.engine import Simulation
    sim = Simulation(scn)
    used = []
    for t in range(scn.workload.duration):
        sim.tick_once()
        used.append(sim.nodes[0].metrics.get("buf_used_bytes", 0.0))
    import numpy as np
    u = np.array(used[50:])
    print(f"tx pool bytes: mean {u.mean()/1e6:.1f}MB min {u.min()/1e6:.1f}MB max {u.max()/1e6:.1f}MB")
