import json
import math

import numpy as np
import pytest

from lyari.atg_channel import slot_geometry
from lyari.channel_dprd import channel_distortion, data_rate, snr
from lyari.conic_forms import (
    EXP,
    RQUAD,
    Affine,
    ConeConstraint,
    ConicProgram,
    ProgramError,
    Variable,
    build_power_lambda_subproblem,
    build_Q_subproblem,
    in_exp_cone,
    in_rquad_cone,
    linearize_Dc_in_Pt,
    linearize_Re_in_lambda,
    linearize_Re_in_Q,
    q_lower_bound,
)
from lyari.lyari_optimizer import DecisionTriple, InfeasibleProgram, _point, evaluate_slot, solve_conic
from lyari.source_dprd import coding_bitrate, coding_delay, dcoe, qp_to_qstep

N_SAMPLES = 10_000
# points this close to a cone boundary are decided by rounding, not by the identity
MARGIN = 1e-9


@pytest.fixture(scope="module")
def ctx(baseline):
    S, cfg = baseline.system, baseline.optimizer
    g = slot_geometry(S.env, S.traj, 5)
    pt_box = (cfg.pt_floor, S.budget.pt_max)
    return S, cfg, g, pt_box


def make_point(ctx, lam=1.0, qp=36.0, pt=60.0, queue=0.05, reserved=None):
    S, cfg, g, pt_box = ctx
    return _point(S, cfg, g.path_loss, queue, DecisionTriple(lam, qp_to_qstep(qp), pt), pt_box, reserved)


# ---------------------------------------------------------------------------
# cone identities


def _separated(a, b):
    return abs(a - b) > MARGIN * max(1.0, abs(a), abs(b))


def test_exp_cone_rate_identity():
    rng = np.random.default_rng(1)
    bad = 0
    for eps, xi in zip(rng.uniform(-1, 20, N_SAMPLES), rng.uniform(-5, 3, N_SAMPLES)):
        if not _separated(eps, math.exp(xi)):
            continue
        bad += in_exp_cone(eps, 1.0, xi) != (eps >= math.exp(xi))
    assert bad == 0


def test_exp_cone_distortion_identity():
    rng = np.random.default_rng(2)
    C, K = 0.0015, 0.55
    bad = 0
    for delta, xi in zip(rng.uniform(1e-6, 0.01, N_SAMPLES), rng.uniform(-5, 5, N_SAMPLES)):
        rhs = (math.log(C) - math.log(delta)) / K
        if not _separated(xi, rhs):
            continue
        bad += in_exp_cone(delta, C, -C * K * xi) != (xi >= rhs)
    assert bad == 0


def test_exp_cone_log_rate_identity():
    rng = np.random.default_rng(3)
    bad = 0
    for s, phi in zip(rng.uniform(0, 50, N_SAMPLES), rng.uniform(-1, 7, N_SAMPLES)):
        z1 = 1.0 + s
        if not _separated(phi, math.log2(z1)):
            continue
        bad += in_exp_cone(z1, 1.0, phi * math.log(2)) != (math.log2(1 + s) >= phi)
    assert bad == 0


def test_rquad_cone_sending_delay_identity():
    rng = np.random.default_rng(4)
    L, B = 1e6, 1e7
    r = math.sqrt(2 * L / B)
    bad = 0
    for phi, tau in zip(rng.uniform(1e-3, 8, N_SAMPLES), rng.uniform(1e-3, 1, N_SAMPLES)):
        if not _separated(tau, L / (B * phi)):
            continue
        bad += in_rquad_cone((phi, tau, r)) != (tau >= L / (B * phi))
    assert bad == 0


def test_rquad_cone_delay_identity():
    rng = np.random.default_rng(5)
    d_max = 2.8
    bad = 0
    for lam, tau, dc in zip(rng.uniform(0, 6, N_SAMPLES), rng.uniform(0, 0.5, N_SAMPLES),
                            rng.uniform(0.01, 0.5, N_SAMPLES)):
        z2, z3 = 2 * lam + 1, (d_max - tau) / dc
        if not _separated((2 * lam + 1) ** 2 * dc + tau, d_max):
            continue
        bad += in_rquad_cone((0.5, z3, z2)) != ((2 * lam + 1) ** 2 * dc + tau <= d_max)
    assert bad == 0


def test_cone_arity_checked():
    with pytest.raises(ProgramError):
        ConeConstraint(EXP, (Affine.of({}, 1.0), Affine.of({}, 1.0)), "short")
    with pytest.raises(ProgramError):
        ConeConstraint(RQUAD, (Affine.of({}, 1.0), Affine.of({}, 1.0)), "short")


def test_program_rejects_undeclared():
    with pytest.raises(ProgramError):
        ConicProgram("p", (Variable("x", 0, 1),), Affine.of({"y": 1}), (), ("x",), ())
    with pytest.raises(ProgramError):
        ConicProgram("p", (Variable("x", 0, 1), Variable("s")), Affine.of({"x": 1}), (), ("x",), ())


# ---------------------------------------------------------------------------
# tangents


@pytest.mark.parametrize("lam,qp", [(1, 20), (1, 36), (4, 30), (16, 45), (30, 50)])
def test_rate_tangent_in_Q(ctx, lam, qp):
    S = ctx[0]
    p = make_point(ctx, lam=lam, qp=qp)
    tan = linearize_Re_in_Q(p)
    assert tan(p.Q0) == coding_bitrate(S.sigma, S.rd, lam, p.Q0)
    assert tan.slope <= 0
    h = 1e-4 * p.Q0
    fd = (coding_bitrate(S.sigma, S.rd, lam, p.Q0 + h) - coding_bitrate(S.sigma, S.rd, lam, p.Q0 - h)) / (2 * h)
    assert tan.slope == pytest.approx(fd, rel=1e-6)


@pytest.mark.parametrize("lam,qp", [(1, 20), (2.5, 36), (4, 30), (16, 45), (30, 50)])
def test_rate_tangent_in_lambda(ctx, lam, qp):
    S = ctx[0]
    p = make_point(ctx, lam=lam, qp=qp)
    tan = linearize_Re_in_lambda(p)
    assert tan(lam) == coding_bitrate(S.sigma, S.rd, lam, p.Q0)
    # sigma falls with lambda, so the rate does too
    assert tan.slope <= 0
    h = 1e-4 * lam
    fd = (coding_bitrate(S.sigma, S.rd, lam + h, p.Q0) - coding_bitrate(S.sigma, S.rd, lam - h, p.Q0)) / (2 * h)
    assert tan.slope == pytest.approx(fd, rel=1e-6)


@pytest.mark.parametrize("pt", [1.0, 20.0, 60.0, 300.0, 600.0])
def test_ber_tangent(ctx, pt):
    S, _, g, _ = ctx
    p = make_point(ctx, pt=pt)
    tan = linearize_Dc_in_Pt(p)
    pn = S.tx.Pn_noise
    assert tan(pt) == channel_distortion(pt, g.path_loss, pn)
    h = 1e-5 * pt
    fd = (channel_distortion(pt + h, g.path_loss, pn) - channel_distortion(pt - h, g.path_loss, pn)) / (2 * h)
    assert tan.slope < 0
    assert tan.slope == pytest.approx(fd, rel=1e-6)


def test_ber_tangent_clamped_at_zero_power(ctx):
    tan = linearize_Dc_in_Pt(make_point(ctx, pt=0.0))
    assert tan.at == 1.0
    assert math.isfinite(tan.slope)


# ---------------------------------------------------------------------------
# program structure


def tight_q_assignment(prog, p, Q):
    tan = linearize_Re_in_Q(p)
    r = tan(Q)
    return {"Q": Q, "Omega": r, "eps": r, "xi": math.log(r), "delta": p.system.rd.C * r ** (-p.system.rd.K)}


def tight_p_assignment(p, lam, pt):
    s = p.system
    r = linearize_Re_in_lambda(p)(lam)
    phi = data_rate(snr(pt, p.path_loss, s.tx.Pn_noise))
    tau = s.tx.L / (s.tx.B * phi)
    return {
        "lam": lam, "Pt": pt, "Omega": r, "eps": r, "xi": math.log(r), "delta": s.rd.C * r ** (-s.rd.K),
        "zeta": linearize_Dc_in_Pt(p)(pt), "phi": phi, "tau": tau, "Z1": 1 + snr(pt, p.path_loss, s.tx.Pn_noise),
        "Z2": 2 * lam + 1, "Z3": (p.d_max - tau) / (s.frames_per_slot * dcoe(s.delay, p.Q0)),
    }


def test_q_program_shape(ctx):
    p = make_point(ctx)
    prog = build_Q_subproblem(p)
    assert {v.name for v in prog.variables} == {"Q", "Omega", "delta", "eps", "xi"}
    assert prog.decision == ("Q",)
    doc = json.loads(prog.to_json())
    assert doc["name"] == prog.name
    assert len(doc["constraints"]) == len(prog.constraints)


def test_power_program_shape(ctx):
    prog = build_power_lambda_subproblem(make_point(ctx))
    assert {v.name for v in prog.variables} == {
        "lam", "Pt", "Omega", "delta", "eps", "xi", "zeta", "phi", "tau", "Z1", "Z2", "Z3"
    }
    assert prog.decision == ("lam", "Pt")
    json.loads(prog.to_json())


def test_point_is_feasible_in_its_programs(ctx):
    p = make_point(ctx, lam=1.0, qp=38.0, pt=60.0)
    qprog = build_Q_subproblem(p)
    assert qprog.max_violation(tight_q_assignment(qprog, p, p.Q0)) <= 1e-12
    pprog = build_power_lambda_subproblem(p)
    assert pprog.max_violation(tight_p_assignment(p, p.lam0, p.Pt0)) <= 1e-9


def test_objective_matches_surrogate_at_point(ctx):
    S, cfg, g, _ = ctx
    p = make_point(ctx, lam=1.0, qp=38.0, pt=60.0)
    m = evaluate_slot(S, cfg, g.path_loss, p.queue_plus, DecisionTriple(p.lam0, p.Q0, p.Pt0))
    pprog = build_power_lambda_subproblem(p)
    assert pprog.evaluate(tight_p_assignment(p, p.lam0, p.Pt0)) == pytest.approx(m.surrogate, rel=1e-12)
    # the Q program carries only the terms that depend on Q
    qprog = build_Q_subproblem(p)
    w = S.symbol_rate / S.rate_unit
    assert qprog.evaluate(tight_q_assignment(qprog, p, p.Q0)) == pytest.approx(
        p.queue_plus * w * m.re + cfg.V * m.de, rel=1e-12
    )


# ---------------------------------------------------------------------------
# programs against independent grid oracles


def q_grid_objective(p, Qs):
    s = p.system
    tan = linearize_Re_in_Q(p)
    w = s.symbol_rate / s.rate_unit
    tsend = p.reserved_tsend
    if tsend is None:
        tsend = s.tx.L / (s.tx.B * data_rate(snr(p.Pt0, p.path_loss, s.tx.Pn_noise)))
    out = np.full(len(Qs), np.inf)
    for i, Q in enumerate(Qs):
        r = tan(Q)
        if r <= 0 or s.frames_per_slot * coding_delay(s.delay, p.lam0, Q) + tsend > p.d_max:
            continue
        out[i] = p.queue_plus * w * r + p.V * s.rd.C * r ** (-s.rd.K)
    return out


@pytest.mark.parametrize("queue,qp,reserved", [(0.05, 36, None), (0.05, 40, 0.2), (0.3, 30, 0.2), (0.0, 36, 0.2)])
def test_q_program_vs_grid(ctx, queue, qp, reserved):
    p = make_point(ctx, qp=qp, queue=queue, reserved=reserved)
    sol = solve_conic(build_Q_subproblem(p))
    Qs = np.linspace(p.q_box[0], p.q_box[1], 10_000)
    ref = q_grid_objective(p, Qs).min()
    assert sol.objective <= ref * (1 + 1e-12)
    assert sol.objective == pytest.approx(ref, rel=1e-4)


def test_q_program_without_queue_goes_to_delay_floor(ctx):
    p = make_point(ctx, queue=0.0, reserved=0.2)
    sol = solve_conic(build_Q_subproblem(p))
    q_lo = max(p.q_box[0], q_lower_bound(p, p.d_max - 0.2))
    assert sol.x["Q"] == pytest.approx(q_lo, rel=1e-9)
    # and the grid agrees that nothing below it is feasible
    obj = q_grid_objective(p, np.linspace(p.q_box[0], p.q_box[1], 10_000))
    assert np.isfinite(obj).any()


def p_grid_objective(p, lams, pts):
    s = p.system
    tan = linearize_Re_in_lambda(p)
    dtan = linearize_Dc_in_Pt(p)
    w_re, w_rc = s.symbol_rate / s.rate_unit, s.tx.B / s.rate_unit
    d_coe = s.frames_per_slot * dcoe(s.delay, p.Q0)
    L, PT = np.meshgrid(lams, pts, indexing="ij")
    r = tan.value + tan.slope * (L - tan.at)
    phi = np.log2(1 + PT / (p.path_loss * s.tx.Pn_noise))
    tau = s.tx.L / (s.tx.B * phi)
    ok = (r > 0) & (tau <= p.d_max_trans) & ((2 * L + 1) ** 2 * d_coe + tau <= p.d_max)
    ok &= PT + s.budget.Pc + s.budget.Pe <= s.budget.Pmax
    with np.errstate(invalid="ignore", divide="ignore"):
        obj = (p.queue_plus * (w_re * r - w_rc * phi)
               + p.V * (s.rd.C * r ** (-s.rd.K) + p.rho1 * (dtan.value + dtan.slope * (PT - dtan.at))
                        + p.rho2 * (PT + s.budget.Pc + s.budget.Pe)))
    return np.where(ok, obj, np.inf)


@pytest.mark.parametrize("queue,lam,qp,pt", [(0.05, 1, 36, 60), (0.05, 1.5, 38, 200), (0.3, 2, 44, 400), (0.0, 1, 36, 60)])
def test_power_program_vs_grid(ctx, queue, lam, qp, pt):
    p = make_point(ctx, lam=lam, qp=qp, pt=pt, queue=queue)
    sol = solve_conic(build_power_lambda_subproblem(p))
    lams = np.linspace(p.lam_box[0], p.lam_box[1], 500)
    pts = np.linspace(p.pt_box[0], p.pt_box[1], 500)
    ref = p_grid_objective(p, lams, pts).min()
    assert sol.objective <= ref + 1e-9 * abs(ref)
    assert sol.objective == pytest.approx(ref, rel=1e-3)


def test_single_point_program():
    prog = ConicProgram(
        "pinned",
        (Variable("x", 2.0, 2.0), Variable("s", 0.0)),
        Affine.of({"s": 1.0}),
        (ConeConstraint("linear-inequality", (Affine.of({"x": 1.0, "s": -1.0}),), "s>=x"),),
        ("x",),
        (("s", "min"),),
    )
    sol = solve_conic(prog)
    assert sol.x == {"x": 2.0, "s": 2.0}


def test_infeasible_power_program_is_flagged(ctx):
    # at QP 30 even lambda = 1 overruns the delay cap
    p = make_point(ctx, lam=4.0, qp=30, pt=200)
    with pytest.raises(InfeasibleProgram):
        solve_conic(build_power_lambda_subproblem(p))
    lams = np.linspace(p.lam_box[0], p.lam_box[1], 200)
    pts = np.linspace(p.pt_box[0], p.pt_box[1], 200)
    assert not np.isfinite(p_grid_objective(p, lams, pts)).any()


def test_infeasible_delay_is_flagged(ctx):
    p = make_point(ctx, lam=32.0, reserved=0.2)
    prog = build_Q_subproblem(p)
    with pytest.raises(InfeasibleProgram):
        solve_conic(prog)


@pytest.mark.parametrize("queue,lam,qp,pt", [(0.05, 1, 36, 60), (0.3, 2, 40, 400)])
def test_interior_point_backend_agrees(ctx, queue, lam, qp, pt):
    pytest.importorskip("cvxpy")
    p = make_point(ctx, lam=lam, qp=qp, pt=pt, queue=queue, reserved=0.2)
    for prog in (build_Q_subproblem(p), build_power_lambda_subproblem(p)):
        ref = solve_conic(prog)
        ip = solve_conic(prog, backend="clarabel")
        assert ip.objective == pytest.approx(ref.objective, rel=1e-5)
        assert prog.max_violation(ip.x) <= 1e-5
