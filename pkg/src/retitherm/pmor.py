"""Parametric model order reduction: IRKA local bases, a global SVD basis,
and DEIM surrogates for the alpha-dependent input/output maps.

The full-order model is projected with Petrov-Galerkin bases V, W obtained
by concatenating IRKA bases at several parameter samples and truncating
via SVD. The parameter-dependent vectors b(alpha) and c_vol(alpha) are
compressed with DEIM so that online evaluation touches only d selected
grid entries (closed-form Beer-Lambert expressions), never an
n_f-dimensional quantity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SolverFailure, ValidationError
from .thermal import BeerLambertTerms, FullOrderModel, ParameterDomain

# ---------------------------------------------------------------------------
# IRKA
# ---------------------------------------------------------------------------

@dataclass
class LocalBasis:
    alpha_sample: np.ndarray
    V: np.ndarray
    W: np.ndarray
    shifts: np.ndarray
    converged: bool
    iterations: int


def _shifted_solve(A, sigma, rhs, trans=False, tol=1e-4):
    """Solve (sigma I - A) x = rhs (or its transpose system).

    If the factorization is singular (sigma hits an eigenvalue), perturb
    sigma once by a relative tol and retry.
    """
    n = A.shape[0]
    for s in (sigma, sigma * (1.0 + tol) + tol):
        M = (s * sp.eye(n, format="csc") - A.tocsc()).astype(complex if np.iscomplexobj(rhs) or np.iscomplex(s) else float)
        try:
            lu = spla.splu(M)
            x = lu.solve(rhs, trans="T" if trans else "N")
        except RuntimeError:
            continue
        if np.all(np.isfinite(x)):
            return x
    raise SolverFailure(f"shifted solve singular at sigma={sigma}")


def _spectral_extent(A) -> tuple[float, float]:
    """Estimates of the smallest and largest eigenvalue magnitudes of A."""
    n = A.shape[0]
    if n <= 200:
        ev = np.abs(la.eigvals(A.toarray()))
        return float(ev.min()), float(ev.max())
    try:
        small = float(np.abs(spla.eigs(A, k=1, sigma=0, which="LM",
                                       return_eigenvectors=False)[0]))
    except Exception:
        small = 1.0 / float(spla.norm(sp.linalg.inv(A.tocsc()), np.inf))
    try:
        large = float(np.abs(spla.eigs(A, k=1, which="LM",
                                       return_eigenvectors=False)[0]))
    except Exception:
        large = float(spla.norm(A, np.inf))
    return small, large


def _basis_columns(A, rhs_builder, shifts, dirs, n_cols, trans, tol):
    """Real basis columns from shifted solves; complex pairs split."""
    cols = []
    used = set()
    for i, s in enumerate(shifts):
        key = (round(s.real, 14), round(abs(s.imag), 14))
        if abs(s.imag) > 1e-12 * max(1.0, abs(s.real)):
            if key in used:
                continue
            used.add(key)
            x = _shifted_solve(A, s, rhs_builder(i).astype(complex),
                               trans=trans, tol=tol)
            cols.append(x.real)
            cols.append(x.imag)
        else:
            x = _shifted_solve(A, s.real, rhs_builder(i), trans=trans, tol=tol)
            cols.append(np.real(x))
        if len(cols) >= n_cols:
            break
    M = np.column_stack(cols[:n_cols])
    Q, _ = la.qr(M, mode="economic")
    return Q


def irka_local_basis(full_model, alpha_s, n_loc: int, tol: float = 1e-4,
                     max_iter: int = 50) -> LocalBasis:
    """Two-sided IRKA for the 1-input / 2-output model at a fixed alpha.

    Shifts are the mirrored reduced poles; the left tangential directions
    come from the reduced-model output residues. Convergence is a
    relative change of the (sorted) shift set below tol.
    """
    A = full_model.A
    n_f = A.shape[0]
    if n_loc >= n_f:
        raise ValidationError("n_loc must be below the full order")
    alpha_s = np.atleast_1d(np.asarray(alpha_s, dtype=float))
    b = full_model.b(alpha_s)
    C = np.vstack([full_model.c_vol(alpha_s), full_model.c_peak])

    lo, hi = _spectral_extent(A)
    shifts = np.geomspace(lo, hi, n_loc).astype(complex)
    dirs = np.tile(np.eye(2), (n_loc // 2 + 1, 1))[:n_loc]  # left directions

    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        V = _basis_columns(A, lambda i: b, shifts, None, n_loc, False, tol)
        W = _basis_columns(A, lambda i: C.T @ dirs[i], shifts, dirs, n_loc,
                           True, tol)
        E = W.T @ V
        Ar = la.solve(E, W.T @ (A @ V))
        Cr = C @ V
        lam, X = la.eig(Ar)
        order = np.argsort(lam.real)
        lam, X = lam[order], X[:, order]
        new_shifts = -lam
        # residue-based left tangential directions
        new_dirs = np.real_if_close((Cr @ X).T)
        norms = np.linalg.norm(new_dirs, axis=1)
        norms[norms == 0] = 1.0
        new_dirs = (new_dirs.T / norms).T

        prev = np.sort_complex(shifts)
        cur = np.sort_complex(new_shifts)
        change = np.max(np.abs(cur - prev) / np.maximum(np.abs(prev), 1e-300))
        shifts, dirs = new_shifts, np.real(new_dirs)
        if change < tol:
            converged = True
            break

    V = _basis_columns(A, lambda i: b, shifts, None, n_loc, False, tol)
    W = _basis_columns(A, lambda i: C.T @ dirs[i], shifts, dirs, n_loc, True, tol)
    return LocalBasis(alpha_sample=alpha_s, V=V, W=W,
                      shifts=np.sort_complex(shifts),
                      converged=converged, iterations=it)


# ---------------------------------------------------------------------------
# global basis
# ---------------------------------------------------------------------------

@dataclass
class GlobalBasis:
    V: np.ndarray
    W: np.ndarray
    singular_values_v: np.ndarray
    singular_values_w: np.ndarray
    discarded_mass_v: float
    discarded_mass_w: float
    cond_wtv: float


def _truncate(columns: np.ndarray, n: int):
    U, s, _ = la.svd(columns, full_matrices=False)
    rank = int(np.sum(s > s[0] * 1e-12))
    if rank < n:
        raise ValidationError(
            f"concatenated basis has rank {rank} < requested order {n}")
    tail = float(np.sqrt(np.sum(s[n:] ** 2) / np.sum(s**2)))
    return U[:, :n], s, tail


def build_global_basis(local_bases: list[LocalBasis], n: int) -> GlobalBasis:
    """Leading-n SVD basis of the concatenated local bases (V and W)."""
    if not local_bases:
        raise ValidationError("need at least one local basis")
    Vcat = np.hstack([lb.V for lb in local_bases])
    Wcat = np.hstack([lb.W for lb in local_bases])
    if n > Vcat.shape[1]:
        raise ValidationError("n exceeds the concatenated column count")
    V, sv, tail_v = _truncate(Vcat, n)
    W, sw, tail_w = _truncate(Wcat, n)
    cond = float(np.linalg.cond(W.T @ V))
    return GlobalBasis(V=V, W=W, singular_values_v=sv, singular_values_w=sw,
                       discarded_mass_v=tail_v, discarded_mass_w=tail_w,
                       cond_wtv=cond)


# ---------------------------------------------------------------------------
# DEIM
# ---------------------------------------------------------------------------

@dataclass
class DeimBasis:
    U: np.ndarray            # n_f x d subspace
    indices: np.ndarray      # d selected rows (columns of the identity)


@dataclass
class DeimFactors:
    input: DeimBasis
    output: DeimBasis

    @property
    def d(self) -> int:
        return self.input.indices.size


def deim_factorize(snapshots: np.ndarray, d: int) -> DeimBasis:
    """POD subspace + greedy DEIM interpolation indices.

    snapshots: (n_f, m) matrix of the alpha-dependent vector at m
    parameter samples.
    """
    if snapshots.ndim != 2 or snapshots.shape[1] < d:
        raise ValidationError(f"need at least d={d} snapshots")
    U, s, _ = la.svd(snapshots, full_matrices=False)
    rank = int(np.sum(s > s[0] * 1e-12))
    if rank < d:
        raise ValidationError(f"snapshot rank {rank} < requested DEIM order {d}")
    U = U[:, :d]
    idx = [int(np.argmax(np.abs(U[:, 0])))]
    for j in range(1, d):
        coeff = la.solve(U[np.ix_(idx, range(j))], U[idx, j])
        resid = U[:, j] - U[:, :j] @ coeff
        idx.append(int(np.argmax(np.abs(resid))))
    idx = np.asarray(idx)
    if abs(la.det(U[idx, :])) == 0:
        raise SolverFailure("DEIM selector produced a singular P^T U")
    return DeimBasis(U=U, indices=idx)


def deim_reconstruct(basis: DeimBasis, full_vector: np.ndarray) -> np.ndarray:
    """U (P^T U)^{-1} P^T v — reconstruction of v from its selected entries."""
    coeff = la.solve(basis.U[basis.indices, :], full_vector[basis.indices])
    return basis.U @ coeff


# ---------------------------------------------------------------------------
# reduced model
# ---------------------------------------------------------------------------

@dataclass
class ReducedModel:
    """Order-n surrogate with DEIM-compressed parameter maps.

    Online evaluation of b(alpha) and c_vol(alpha) costs O(d n) plus d
    closed-form entry evaluations; no n_f-sized quantity is touched.
    """

    A: np.ndarray
    input_gain: np.ndarray       # n x d, maps selected b entries to b(alpha)
    b_entries: BeerLambertTerms
    output_gain: np.ndarray      # d x n, maps selected c entries to c_vol(alpha)
    c_entries: BeerLambertTerms
    c_peak: np.ndarray           # 1 x n (stored as (n,))
    lift_basis: np.ndarray | None  # V, n_f x n (only used for full-state lifting)
    n: int
    d: int
    p: int
    alpha_ch_fixed: float
    domain: ParameterDomain
    config_hash: str = ""

    def _alpha2(self, alpha) -> np.ndarray:
        alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
        if alpha.size == 1:
            return np.array([alpha[0], self.alpha_ch_fixed])
        return alpha

    def b(self, alpha) -> np.ndarray:
        return self.input_gain @ self.b_entries.values(self._alpha2(alpha))

    def b_grad(self, alpha) -> np.ndarray:
        """d b / d alpha, shape (n, 2)."""
        return self.input_gain @ self.b_entries.gradient(self._alpha2(alpha))

    def c_vol(self, alpha) -> np.ndarray:
        return self.c_entries.values(self._alpha2(alpha)) @ self.output_gain

    def c_vol_grad(self, alpha) -> np.ndarray:
        """d c_vol / d alpha, shape (2, n)."""
        return self.c_entries.gradient(self._alpha2(alpha)).T @ self.output_gain

    def lift(self, x: np.ndarray) -> np.ndarray:
        if self.lift_basis is None:
            raise ValidationError("reduced model carries no lifting basis")
        return x @ self.lift_basis.T if x.ndim > 1 else self.lift_basis @ x


def reduce_model(full_model: FullOrderModel, basis: GlobalBasis,
                 deim: DeimFactors, p: int,
                 domain: ParameterDomain | None = None) -> ReducedModel:
    """Petrov-Galerkin projection plus DEIM compression of the maps."""
    if basis.cond_wtv > 1e12:
        raise SolverFailure(f"W^T V numerically singular (cond {basis.cond_wtv:.2e})")
    V, W = basis.V, basis.W
    E = W.T @ V
    A = la.solve(E, W.T @ (full_model.A @ V))
    lam = la.eigvals(A)
    if np.any(lam.real >= 0):
        raise SolverFailure(
            f"reduced operator is not Hurwitz (max Re lambda = {lam.real.max():.3e})")

    Ub, ib = deim.input.U, deim.input.indices
    Uc, ic = deim.output.U, deim.output.indices
    input_gain = la.solve(E, W.T @ (Ub @ la.inv(Ub[ib, :])))
    # c_vol(alpha) = c_tilde(alpha) (U_c^T P_c)^{-1} U_c^T V
    output_gain = la.solve(Uc[ic, :].T, Uc.T @ V)

    if domain is None:
        dom = full_model.domain
        domain = ParameterDomain(dom.alpha_min[:p], dom.alpha_max[:p])
    return ReducedModel(
        A=A,
        input_gain=input_gain,
        b_entries=full_model.b_terms.restrict(ib),
        output_gain=output_gain,
        c_entries=full_model.c_terms.restrict(ic),
        c_peak=full_model.c_peak @ V,
        lift_basis=V,
        n=A.shape[0], d=deim.d, p=p,
        alpha_ch_fixed=full_model.absorption.alpha_ch,
        domain=domain,
        config_hash=full_model.config_hash,
    )


# ---------------------------------------------------------------------------
# build pipeline
# ---------------------------------------------------------------------------

def _alpha_grid_1d(domain: ParameterDomain, axis: int, count: int) -> np.ndarray:
    return np.linspace(domain.alpha_min[axis], domain.alpha_max[axis], count)


def basis_parameter_samples(full_model: FullOrderModel, p: int,
                            per_axis: int) -> list[np.ndarray]:
    dom = full_model.domain
    rpe = _alpha_grid_1d(dom, 0, per_axis)
    if p == 1:
        return [np.array([a, full_model.absorption.alpha_ch]) for a in rpe]
    ch = _alpha_grid_1d(dom, 1, per_axis)
    return [np.array([a, c]) for a in rpe for c in ch]


def deim_parameter_samples(full_model: FullOrderModel, p: int,
                           count: int) -> list[np.ndarray]:
    dom = full_model.domain
    if p == 1:
        rpe = _alpha_grid_1d(dom, 0, count)
        return [np.array([a, full_model.absorption.alpha_ch]) for a in rpe]
    rpe = _alpha_grid_1d(dom, 0, count)
    ch = _alpha_grid_1d(dom, 1, count)
    return [np.array([a, c]) for a in rpe for c in ch]


def build_rom(full_model: FullOrderModel, p: int, cfg: dict) -> ReducedModel:
    """Full pMOR pipeline: IRKA local bases -> global basis -> DEIM -> ROM."""
    pm = cfg["pmor"]
    n = pm["order_1p"] if p == 1 else pm["order_2p"]
    d = pm["deim_order"]
    locals_ = [
        irka_local_basis(full_model, a, n, tol=pm["irka_tol"],
                         max_iter=pm["irka_max_iter"])
        for a in basis_parameter_samples(full_model, p, pm["basis_samples_per_axis"])
    ]
    gb = build_global_basis(locals_, n)
    count = pm["deim_samples_1p"] if p == 1 else pm["deim_samples_2p"]
    samples = deim_parameter_samples(full_model, p, count)
    b_snaps = np.column_stack([full_model.b(a) for a in samples])
    c_snaps = np.column_stack([full_model.c_vol(a) for a in samples])
    deim = DeimFactors(input=deim_factorize(b_snaps, d),
                       output=deim_factorize(c_snaps, d))
    return reduce_model(full_model, gb, deim, p)


# ---------------------------------------------------------------------------
# ROM simulation and error sweep
# ---------------------------------------------------------------------------

def simulate_rom(rom: ReducedModel, alpha, u, t_final: float, dt: float):
    """Implicit-Euler integration of the reduced model from the zero state."""
    n_steps = int(round(t_final / dt))
    u_seq = np.broadcast_to(np.asarray(u, dtype=float), (n_steps,))
    M = la.inv(np.eye(rom.n) - dt * rom.A)
    b = rom.b(alpha)
    c = rom.c_vol(alpha)
    x = np.zeros(rom.n)
    states = np.zeros((n_steps + 1, rom.n))
    t_vol = np.zeros(n_steps + 1)
    t_peak = np.zeros(n_steps + 1)
    for k in range(n_steps):
        x = M @ (x + dt * b * u_seq[k])
        states[k + 1] = x
        t_vol[k + 1] = c @ x
        t_peak[k + 1] = rom.c_peak @ x
    return dt * np.arange(n_steps + 1), states, t_vol, t_peak


def rom_error_sweep(full_model: FullOrderModel, rom: ReducedModel,
                    alpha_grid, u=0.030, t_final=0.4, dt=0.001) -> list[dict]:
    """Max relative output errors of the ROM versus the full model per alpha."""
    from .thermal import simulate_full

    rows = []
    for alpha in alpha_grid:
        ref = simulate_full(full_model, alpha, u, t_final, dt, store_states=False)
        _, _, tv, tp = simulate_rom(rom, alpha, u, t_final, dt)
        sl = slice(1, None)  # skip t = 0 (both outputs zero)
        err_vol = np.max(np.abs(tv[sl] - ref.t_vol[sl]) / np.abs(ref.t_vol[sl]))
        err_peak = np.max(np.abs(tp[sl] - ref.t_peak[sl]) / np.abs(ref.t_peak[sl]))
        a = np.atleast_1d(np.asarray(alpha, dtype=float))
        row = {"alpha_rpe": float(a[0]), "max_rel_err_vol": float(err_vol),
               "max_rel_err_peak": float(err_peak)}
        if a.size > 1:
            row["alpha_ch"] = float(a[1])
        rows.append(row)
    return rows


def sweep_to_csv(rows: list[dict], path) -> None:
    if not rows:
        with open(path, "w") as fh:
            fh.write("alpha_rpe,max_rel_err_vol,max_rel_err_peak\n")
        return
    keys = list(rows[0].keys())
    with open(path, "w") as fh:
        fh.write(",".join(keys) + "\n")
        for row in rows:
            fh.write(",".join(f"{row[k]:.9e}" for k in keys) + "\n")


# ---------------------------------------------------------------------------
# ROM archive
# ---------------------------------------------------------------------------

def save_rom(rom: ReducedModel, path) -> None:
    """Single-file archive holding everything the estimators need."""
    meta = {
        "n": rom.n, "d": rom.d, "p": rom.p,
        "alpha_ch_fixed": rom.alpha_ch_fixed,
        "config_hash": rom.config_hash,
    }
    np.savez(
        path,
        A=rom.A, input_gain=rom.input_gain, output_gain=rom.output_gain,
        c_peak=rom.c_peak, lift_basis=rom.lift_basis,
        domain_min=rom.domain.alpha_min, domain_max=rom.domain.alpha_max,
        meta=json.dumps(meta),
        **_terms_arrays("b", rom.b_entries),
        **_terms_arrays("c", rom.c_entries),
    )


def _terms_arrays(prefix: str, terms: BeerLambertTerms) -> dict:
    return {
        f"{prefix}_node": terms.node, f"{prefix}_const": terms.const,
        f"{prefix}_z": terms.z, f"{prefix}_layer": terms.layer,
        f"{prefix}_intervals": np.asarray(terms.intervals),
        f"{prefix}_mu0": terms.mu0,
        f"{prefix}_ntotal": np.array([terms.n_total]),
    }


def _terms_from_arrays(prefix: str, data) -> BeerLambertTerms:
    return BeerLambertTerms(
        data[f"{prefix}_node"], data[f"{prefix}_const"], data[f"{prefix}_z"],
        data[f"{prefix}_layer"], data[f"{prefix}_intervals"],
        data[f"{prefix}_mu0"], int(data[f"{prefix}_ntotal"][0]),
    )


def load_rom(path) -> ReducedModel:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        return ReducedModel(
            A=data["A"],
            input_gain=data["input_gain"],
            b_entries=_terms_from_arrays("b", data),
            output_gain=data["output_gain"],
            c_entries=_terms_from_arrays("c", data),
            c_peak=data["c_peak"],
            lift_basis=data["lift_basis"],
            n=meta["n"], d=meta["d"], p=meta["p"],
            alpha_ch_fixed=meta["alpha_ch_fixed"],
            domain=ParameterDomain(data["domain_min"], data["domain_max"]),
            config_hash=meta["config_hash"],
        )
