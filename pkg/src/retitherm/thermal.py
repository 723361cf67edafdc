"""Full-order thermal model of laser heating in a layered eye-fundus cylinder.

The temperature increase T(r, z, t) obeys

    rho * C_p * dT/dt = k * Lap(T) + rho * C_p * Q,

on an axisymmetric two-cylinder domain with homogeneous Dirichlet
conditions on the outer cylinder boundary and a symmetry condition at
r = 0. The laser source Q follows the Beer-Lambert law inside the inner
(irradiated) cylinder, with absorption in the RPE and choroid layers
scaled by dimensionless prefactors alpha = (alpha_rpe, alpha_ch).

Spatial discretization is a finite-difference scheme on a tensor grid in
(r, z) whose planes are aligned with every layer interface. The result is
a sparse state operator A (1/s), a parameter-dependent input vector
b(alpha), a parameter-dependent volume-temperature output row
c_vol(alpha), and a constant peak-temperature selector row c_peak.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SolverFailure, ValidationError

LAYER_RPE = 0
LAYER_CH = 1


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Layer:
    name: str
    z_start: float
    z_end: float
    absorbing: bool = False

    @property
    def thickness(self) -> float:
        return self.z_end - self.z_start


@dataclass(frozen=True)
class LayerStack:
    """Ordered, contiguous tissue layers; exactly two carry absorption."""

    layers: tuple[Layer, ...]

    def __post_init__(self):
        if not self.layers:
            raise ValidationError("layer stack is empty")
        prev_end = self.layers[0].z_start
        for lay in self.layers:
            if lay.thickness <= 0:
                raise ValidationError(
                    f"layer '{lay.name}' has degenerate interval "
                    f"[{lay.z_start}, {lay.z_end}]"
                )
            if abs(lay.z_start - prev_end) > 1e-15:
                raise ValidationError(
                    f"layer '{lay.name}' does not start where the previous "
                    f"layer ends ({lay.z_start} vs {prev_end})"
                )
            prev_end = lay.z_end
        absorbing = [lay for lay in self.layers if lay.absorbing]
        if len(absorbing) != 2:
            raise ValidationError(
                f"expected exactly two absorbing layers, got {len(absorbing)}"
            )

    @property
    def z_total(self) -> float:
        return self.layers[-1].z_end

    @property
    def absorbing_intervals(self) -> tuple[tuple[float, float], tuple[float, float]]:
        """((z1, z2), (z3, z4)) for the RPE and choroid layers."""
        iv = [(lay.z_start, lay.z_end) for lay in self.layers if lay.absorbing]
        return iv[0], iv[1]

    @property
    def interfaces(self) -> np.ndarray:
        pts = [self.layers[0].z_start] + [lay.z_end for lay in self.layers]
        return np.asarray(pts)


def layers_from_config(layer_cfg: list[dict]) -> LayerStack:
    """Build a LayerStack from config entries (name, thickness, absorbing)."""
    z = 0.0
    layers = []
    for entry in layer_cfg:
        t = float(entry["thickness_m"])
        layers.append(Layer(entry["name"], z, z + t, bool(entry["absorbing"])))
        z += t
    return LayerStack(tuple(layers))


@dataclass(frozen=True)
class GridSpec:
    n_r: int = 30
    n_z: int = 60


@dataclass(frozen=True)
class CylinderGeometry:
    """Axisymmetric (r, z) grid over the two-cylinder domain.

    The z grid is piecewise uniform per layer so that every layer
    interface lies on a grid plane; the r grid is piecewise uniform on
    [0, R_I] and [R_I, R_O] so the inner-cylinder radius is a grid line.
    """

    r_inner: float
    r_outer: float
    stack: LayerStack
    r_nodes: np.ndarray
    z_nodes: np.ndarray
    layer_subdiv: tuple[int, ...]
    n_r_inner: int
    n_r_outer: int

    @property
    def n_cells(self) -> int:
        return (len(self.r_nodes) - 1) * (len(self.z_nodes) - 1)

    def refine(self, factor: int) -> "CylinderGeometry":
        """Split every grid interval `factor` times in each direction."""
        subdiv = tuple(m * factor for m in self.layer_subdiv)
        return _geometry_from_counts(
            self.r_inner, self.r_outer, self.stack, subdiv,
            self.n_r_inner * factor, self.n_r_outer * factor,
        )


@dataclass(frozen=True)
class MaterialProps:
    density: float          # kg/m^3
    heat_capacity: float    # J/(kg K)
    conductivity: float     # W/(m K)

    def __post_init__(self):
        if min(self.density, self.heat_capacity, self.conductivity) <= 0:
            raise ValidationError("material properties must be strictly positive")

    @property
    def volumetric_heat_capacity(self) -> float:
        return self.density * self.heat_capacity

    @property
    def diffusivity(self) -> float:
        return self.conductivity / self.volumetric_heat_capacity


@dataclass(frozen=True)
class AbsorptionParams:
    """Dimensionless prefactors and baseline absorption coefficients (1/m)."""

    alpha_rpe: float
    alpha_ch: float
    mu0_rpe: float
    mu0_ch: float

    def __post_init__(self):
        if self.alpha_rpe <= 0 or self.alpha_ch <= 0:
            raise ValidationError("absorption prefactors must be positive")
        if self.mu0_rpe <= 0 or self.mu0_ch <= 0:
            raise ValidationError("baseline absorption coefficients must be positive")

    @property
    def mu_rpe(self) -> float:
        return self.alpha_rpe * self.mu0_rpe

    @property
    def mu_ch(self) -> float:
        return self.alpha_ch * self.mu0_ch

    @property
    def alpha(self) -> np.ndarray:
        return np.array([self.alpha_rpe, self.alpha_ch])


@dataclass(frozen=True)
class ParameterDomain:
    """Box of admissible prefactors; p = 1 (RPE only) or p = 2."""

    alpha_min: np.ndarray
    alpha_max: np.ndarray

    def __post_init__(self):
        amin = np.atleast_1d(np.asarray(self.alpha_min, dtype=float))
        amax = np.atleast_1d(np.asarray(self.alpha_max, dtype=float))
        object.__setattr__(self, "alpha_min", amin)
        object.__setattr__(self, "alpha_max", amax)
        if amin.shape != amax.shape or amin.ndim != 1 or amin.size not in (1, 2):
            raise ValidationError("bounds must both be 1- or 2-vectors")
        if not np.all(amin < amax):
            raise ValidationError("alpha_min must be componentwise below alpha_max")

    @property
    def p(self) -> int:
        return self.alpha_min.size

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.alpha_min + self.alpha_max)

    def contains(self, alpha: np.ndarray) -> bool:
        a = np.atleast_1d(alpha)[: self.p]
        return bool(np.all(a >= self.alpha_min) and np.all(a <= self.alpha_max))


# ---------------------------------------------------------------------------
# Beer-Lambert terms: closed-form, alpha-dependent vector entries
# ---------------------------------------------------------------------------

class BeerLambertTerms:
    """Sparse sum-of-terms representation of an alpha-dependent vector.

    Each term contributes   const * mu_layer(alpha) * exp(-I(z; alpha))
    to one node (or, for layer = -1, just const * exp(-I(z; alpha))),
    where I(z; alpha) is the cumulative optical depth from the surface to
    depth z. Both the laser source b(alpha) and the volume-temperature
    output row c_vol(alpha) have this structure, so a few selected
    entries (and their alpha-gradients) can be evaluated in closed form
    without any full-grid work.
    """

    def __init__(self, node, const, z, layer, intervals, mu0, n_total):
        self.node = np.asarray(node, dtype=np.int64)
        self.const = np.asarray(const, dtype=float)
        self.z = np.asarray(z, dtype=float)
        self.layer = np.asarray(layer, dtype=np.int64)
        self.intervals = tuple((float(a), float(b)) for a, b in intervals)
        self.mu0 = np.asarray(mu0, dtype=float)
        self.n_total = int(n_total)
        # Optical path length inside each absorbing layer up to each term's z.
        (z1, z2), (z3, z4) = self.intervals
        self._len_rpe = np.clip(self.z, z1, z2) - z1
        self._len_ch = np.clip(self.z, z3, z4) - z3
        # Layer-membership masks, precomputed so evaluation is branch-free.
        self._fac_none = (self.layer < 0).astype(float)
        self._fac_rpe = (self.layer == LAYER_RPE).astype(float)
        self._fac_ch = (self.layer == LAYER_CH).astype(float)
        self.eval_count = 0

    @property
    def n_terms(self) -> int:
        return self.node.size

    def _term_values(self, alpha: np.ndarray):
        alpha = np.asarray(alpha, dtype=float)
        mu = alpha * self.mu0
        depth = mu[LAYER_RPE] * self._len_rpe + mu[LAYER_CH] * self._len_ch
        atten = np.exp(-depth)
        factor = self._fac_none + mu[LAYER_RPE] * self._fac_rpe \
            + mu[LAYER_CH] * self._fac_ch
        vals = self.const * factor * atten
        return vals, atten

    def assemble(self, alpha: np.ndarray) -> np.ndarray:
        """Dense length-n vector of the alpha-dependent quantity."""
        vals, _ = self._term_values(alpha)
        return np.bincount(self.node, weights=vals, minlength=self.n_total)

    def restrict(self, indices: np.ndarray) -> "BeerLambertTerms":
        """Keep only the terms at the given node indices (renumbered 0..d-1)."""
        indices = np.asarray(indices, dtype=np.int64)
        pos = {int(ix): j for j, ix in enumerate(indices)}
        keep = np.array([int(n) in pos for n in self.node])
        new_nodes = np.array([pos[int(n)] for n in self.node[keep]], dtype=np.int64)
        return BeerLambertTerms(
            new_nodes, self.const[keep], self.z[keep], self.layer[keep],
            self.intervals, self.mu0, indices.size,
        )

    def values(self, alpha: np.ndarray) -> np.ndarray:
        """Entry values; O(n_terms) closed-form work only."""
        self.eval_count += 1
        vals, _ = self._term_values(alpha)
        return np.bincount(self.node, weights=vals, minlength=self.n_total)

    def gradient(self, alpha: np.ndarray) -> np.ndarray:
        """d(entries)/d(alpha), shape (n_total, 2)."""
        vals, atten = self._term_values(alpha)
        grad = np.empty((self.n_total, 2))
        for j, plen in ((LAYER_RPE, self._len_rpe), (LAYER_CH, self._len_ch)):
            dterm = (
                self.const * self.mu0[j] * (self.layer == j) * atten
                - vals * self.mu0[j] * plen
            )
            grad[:, j] = np.bincount(self.node, weights=dterm, minlength=self.n_total)
        return grad

    def values_and_gradient(self, alpha: np.ndarray):
        """Entries and their alpha-gradient from a single evaluation."""
        self.eval_count += 1
        vals, atten = self._term_values(alpha)
        grad = np.empty((self.n_total, 2))
        for j, plen, fac in ((LAYER_RPE, self._len_rpe, self._fac_rpe),
                             (LAYER_CH, self._len_ch, self._fac_ch)):
            dterm = self.const * self.mu0[j] * fac * atten \
                - vals * self.mu0[j] * plen
            grad[:, j] = np.bincount(self.node, weights=dterm,
                                     minlength=self.n_total)
        return np.bincount(self.node, weights=vals, minlength=self.n_total), grad


def optical_depth(z, intervals, mu_rpe, mu_ch):
    """Cumulative optical depth from the surface down to depth z."""
    (z1, z2), (z3, z4) = intervals
    z = np.asarray(z, dtype=float)
    return mu_rpe * (np.clip(z, z1, z2) - z1) + mu_ch * (np.clip(z, z3, z4) - z3)


def absorbed_power_fraction(absorption: AbsorptionParams, stack: LayerStack) -> float:
    """Closed-form fraction of beam power absorbed over the whole stack."""
    (z1, z2), (z3, z4) = stack.absorbing_intervals
    depth = absorption.mu_rpe * (z2 - z1) + absorption.mu_ch * (z4 - z3)
    return 1.0 - float(np.exp(-depth))


# ---------------------------------------------------------------------------
# geometry construction
# ---------------------------------------------------------------------------

def _geometry_from_counts(r_inner, r_outer, stack, layer_subdiv,
                          n_r_inner, n_r_outer) -> CylinderGeometry:
    z_parts = []
    n_lay = len(stack.layers)
    for li, (lay, m) in enumerate(zip(stack.layers, layer_subdiv)):
        xi = np.arange(m + 1) / m
        if lay.absorbing or m < 3:
            frac = xi
        elif li == 0:
            # first layer: cluster toward the tissue side only
            frac = np.sin(0.5 * np.pi * xi)
        elif li == n_lay - 1:
            # last layer: cluster toward the tissue side only
            frac = 1.0 - np.cos(0.5 * np.pi * xi)
        else:
            # interior non-absorbing layers: cluster toward both interfaces
            frac = 0.5 * (1.0 - np.cos(np.pi * xi))
        pts = lay.z_start + lay.thickness * frac
        z_parts.append(pts[:-1])
    z_nodes = np.concatenate(z_parts + [np.array([stack.z_total])])
    r_in = np.linspace(0.0, r_inner, n_r_inner + 1)
    # geometric stretch outside the beam, first cell matching the inner
    # spacing so the far field costs few nodes
    h0 = r_inner / n_r_inner
    length = r_outer - r_inner
    n_out = n_r_outer
    if h0 * n_out >= length:
        r_out = np.linspace(r_inner, r_outer, n_out + 1)[1:]
    else:
        from scipy.optimize import brentq

        q = brentq(lambda q: h0 * (q**n_out - 1.0) / (q - 1.0) - length,
                   1.0 + 1e-9, 10.0)
        steps = h0 * q ** np.arange(n_out)
        r_out = r_inner + np.cumsum(steps)
        r_out[-1] = r_outer
    r_nodes = np.concatenate([r_in, r_out])
    return CylinderGeometry(
        r_inner=r_inner, r_outer=r_outer, stack=stack,
        r_nodes=r_nodes, z_nodes=z_nodes,
        layer_subdiv=tuple(layer_subdiv),
        n_r_inner=n_r_inner, n_r_outer=n_r_outer,
    )


def build_geometry(stack: LayerStack, grid: GridSpec,
                   r_inner: float = 100e-6,
                   outer_radius_factor: float = 6.0) -> tuple[LayerStack, CylinderGeometry]:
    """Validate the layer stack and build the aligned (r, z) grid.

    Every layer interface becomes a grid plane; absorbing layers get an
    even number of subintervals (at least 2) so their center is a node.
    """
    if grid.n_r < 3 or grid.n_z < 3:
        raise ValidationError("grid counts must be at least 3")
    if r_inner <= 0 or outer_radius_factor <= 1:
        raise ValidationError("need 0 < R_I < R_O")
    total = stack.z_total - stack.layers[0].z_start
    subdiv = []
    for lay in stack.layers:
        m = int(round(grid.n_z * lay.thickness / total))
        if lay.absorbing:
            # keep the optical depth per cell small and the layer center
            # on a grid plane
            m = max(4, m + (m % 2))
        else:
            m = max(1, m)
        subdiv.append(m)
    r_outer = outer_radius_factor * r_inner
    # put roughly a third of the radial cells inside the beam; the outer
    # region is geometrically stretched and needs fewer cells
    n_r_inner = max(6, int(round((grid.n_r - 1) * 0.35)))
    n_r_outer = max(4, grid.n_r - 1 - n_r_inner)
    geom = _geometry_from_counts(r_inner, r_outer, stack, subdiv,
                                 n_r_inner, n_r_outer)
    for zi in stack.interfaces:
        if not np.any(np.isclose(geom.z_nodes, zi, rtol=0, atol=1e-12)):
            raise ValidationError(f"layer interface z = {zi} not on a grid plane")
    return stack, geom


# ---------------------------------------------------------------------------
# finite-difference discretization
# ---------------------------------------------------------------------------

@dataclass
class Discretization:
    """Bookkeeping for the eliminated-Dirichlet unknown vector."""

    geometry: CylinderGeometry
    r: np.ndarray          # radius of each unknown node
    z: np.ndarray          # depth of each unknown node
    volume: np.ndarray     # dual-cell volume of each unknown node (m^3)
    idx_grid: np.ndarray   # (n_r_unknown, n_z_unknown) -> flat index
    ir_of: np.ndarray
    iz_of: np.ndarray

    @property
    def n(self) -> int:
        return self.r.size

    def node_at(self, r_val: float, z_val: float) -> int:
        hit = np.where(
            np.isclose(self.r, r_val, rtol=0, atol=1e-12)
            & np.isclose(self.z, z_val, rtol=0, atol=1e-12)
        )[0]
        if hit.size != 1:
            raise ValidationError(f"no unique node at r={r_val}, z={z_val}")
        return int(hit[0])


def _build_discretization(geom: CylinderGeometry) -> Discretization:
    r_nodes, z_nodes = geom.r_nodes, geom.z_nodes
    # Unknowns: r < R_O (Dirichlet at the lateral boundary) and interior z.
    nru = len(r_nodes) - 1
    nzu = len(z_nodes) - 2
    idx_grid = np.arange(nru * nzu).reshape(nru, nzu)
    ir_of = np.repeat(np.arange(nru), nzu)
    iz_of = np.tile(np.arange(1, nzu + 1), nru)
    r = r_nodes[ir_of]
    z = z_nodes[iz_of]
    # Dual cell extents for volume integrals.
    r_lo = np.where(ir_of == 0, 0.0, 0.5 * (r_nodes[ir_of] + r_nodes[np.maximum(ir_of - 1, 0)]))
    r_hi = 0.5 * (r_nodes[ir_of] + r_nodes[ir_of + 1])
    dz = 0.5 * (z_nodes[iz_of + 1] - z_nodes[iz_of - 1])
    volume = np.pi * (r_hi**2 - r_lo**2) * dz
    return Discretization(geom, r, z, volume, idx_grid, ir_of, iz_of)


@dataclass
class OperatorSkeleton:
    """State operator A (1/s) plus grid bookkeeping, before source/outputs."""

    A: sp.csr_matrix
    disc: Discretization
    material: MaterialProps

    @property
    def n_f(self) -> int:
        return self.disc.n


def assemble_operator(geometry: CylinderGeometry,
                      material: MaterialProps) -> OperatorSkeleton:
    """Finite-difference heat operator in axisymmetric (r, z) coordinates.

    Dirichlet rows on the outer-cylinder boundary are eliminated; the
    r = 0 axis carries the symmetry condition (the radial Laplacian limit
    2 * d2T/dr2).
    """
    disc = _build_discretization(geometry)
    kappa = material.diffusivity
    r_nodes, z_nodes = geometry.r_nodes, geometry.z_nodes
    nru, nzu = disc.idx_grid.shape

    rows, cols, vals = [], [], []

    def add(i, j, v):
        rows.append(i)
        cols.append(j)
        vals.append(v)

    for ir in range(nru):
        for k, iz in enumerate(range(1, nzu + 1)):
            i = disc.idx_grid[ir, k]
            # axial part (nonuniform 3-point second difference)
            hm = z_nodes[iz] - z_nodes[iz - 1]
            hp = z_nodes[iz + 1] - z_nodes[iz]
            cm = 2.0 / (hm * (hm + hp))
            cp = 2.0 / (hp * (hm + hp))
            add(i, i, -kappa * (cm + cp))
            if iz - 1 >= 1:
                add(i, disc.idx_grid[ir, k - 1], kappa * cm)
            if iz + 1 <= nzu:
                add(i, disc.idx_grid[ir, k + 1], kappa * cp)
            # radial part
            if ir == 0:
                h = r_nodes[1] - r_nodes[0]
                add(i, i, -kappa * 4.0 / h**2)
                add(i, disc.idx_grid[1, k], kappa * 4.0 / h**2)
            else:
                hm = r_nodes[ir] - r_nodes[ir - 1]
                hp = r_nodes[ir + 1] - r_nodes[ir]
                rr = r_nodes[ir]
                am = 2.0 / (hm * (hm + hp)) - hp / (rr * hm * (hm + hp))
                ap = 2.0 / (hp * (hm + hp)) + hm / (rr * hp * (hm + hp))
                a0 = -2.0 / (hm * hp) + (hp - hm) / (rr * hm * hp)
                add(i, i, kappa * a0)
                add(i, disc.idx_grid[ir - 1, k], kappa * am)
                if ir + 1 <= nru - 1:
                    add(i, disc.idx_grid[ir + 1, k], kappa * ap)

    A = sp.csr_matrix((vals, (rows, cols)), shape=(disc.n, disc.n))
    return OperatorSkeleton(A=A, disc=disc, material=material)


# ---------------------------------------------------------------------------
# source and outputs
# ---------------------------------------------------------------------------

def _layer_of_nodes(z, stack: LayerStack) -> np.ndarray:
    """Absorbing-layer id per node (-1 outside), half-open [start, end)."""
    (z1, z2), (z3, z4) = stack.absorbing_intervals
    out = np.full(z.shape, -1, dtype=np.int64)
    out[(z >= z1) & (z < z2)] = LAYER_RPE
    out[(z >= z3) & (z < z4)] = LAYER_CH
    return out


def source_terms(skeleton: OperatorSkeleton,
                 absorption: AbsorptionParams) -> BeerLambertTerms:
    """Unit-power (u = 1 W) Beer-Lambert source as closed-form terms.

    Node values are the Beer-Lambert heat rate
    (1 / (pi R_I^2 rho C_p)) * mu(z) * exp(-depth(z)) for r <= R_I,
    averaged exactly over each node's dual cell. The per-cell integral
    of mu * exp(-depth) telescopes to attenuation differences, so the
    deposited power on the grid matches the closed-form Beer-Lambert
    absorbed power exactly at every resolution, and each node value
    remains a closed-form (differentiable) function of alpha.
    """
    disc = skeleton.disc
    geom = disc.geometry
    r_nodes, z_nodes = geom.r_nodes, geom.z_nodes
    ri2 = geom.r_inner**2
    scale = 1.0 / (np.pi * ri2 * skeleton.material.volumetric_heat_capacity)
    intervals = geom.stack.absorbing_intervals

    node, const, zs, layer = [], [], [], []
    for j in range(disc.n):
        # radial overlap fraction of the dual annulus with the beam disk
        ir = disc.ir_of[j]
        r_lo = 0.0 if ir == 0 else 0.5 * (r_nodes[ir] + r_nodes[ir - 1])
        r_hi = 0.5 * (r_nodes[ir] + r_nodes[ir + 1])
        if r_lo >= geom.r_inner:
            continue
        rad_frac = (min(r_hi, geom.r_inner) ** 2 - r_lo**2) / (r_hi**2 - r_lo**2)
        # dual cell in z, intersected with each absorbing layer
        iz = disc.iz_of[j]
        z_lo = 0.5 * (z_nodes[iz] + z_nodes[iz - 1])
        z_hi = 0.5 * (z_nodes[iz] + z_nodes[iz + 1])
        dz = z_hi - z_lo
        for lay, (za, zb) in enumerate(intervals):
            pa, pb = max(z_lo, za), min(z_hi, zb)
            if pb <= pa:
                continue
            # integral of mu * exp(-depth) over [pa, pb] equals
            # exp(-depth(pa)) - exp(-depth(pb))
            cmag = scale * rad_frac / dz
            node.extend((j, j))
            const.extend((cmag, -cmag))
            zs.extend((pa, pb))
            layer.extend((-1, -1))

    return BeerLambertTerms(
        node, const, zs, layer, intervals,
        np.array([absorption.mu0_rpe, absorption.mu0_ch]),
        disc.n,
    )


def assemble_source(skeleton: OperatorSkeleton, absorption: AbsorptionParams,
                    u: float):
    """Heat source Q_h (K/s per node) at power u, plus the map alpha -> b(alpha)."""
    if u < 0:
        raise ValidationError("laser power must be nonnegative")
    terms = source_terms(skeleton, absorption)
    q_h = terms.assemble(absorption.alpha) * u
    return q_h, terms


def output_terms(skeleton: OperatorSkeleton, absorption: AbsorptionParams,
                 z_range: tuple[float, float] | None = None) -> BeerLambertTerms:
    """Volume-temperature output row c_vol(alpha) as closed-form terms.

    Discretizes the depth-weighted integral of the disk-averaged
    temperature: trapezoidal annulus weights over r <= R_I, and a
    per-interval trapezoid in z over [z_b, z_e] with one-sided absorption
    values at layer interfaces.
    """
    disc = skeleton.disc
    geom = disc.geometry
    stack = geom.stack
    (z1, z2), (z3, z4) = stack.absorbing_intervals
    zb, ze = z_range if z_range is not None else (z1, z4)

    # radial disk-average weights: (2 / R_I^2) * trapz(r * T, r) over [0, R_I]
    r_in = geom.r_nodes[: geom.n_r_inner + 1]
    wr = np.zeros(r_in.size)
    for a in range(r_in.size - 1):
        h = r_in[a + 1] - r_in[a]
        wr[a] += 0.5 * h * r_in[a]
        wr[a + 1] += 0.5 * h * r_in[a + 1]
    wr *= 2.0 / geom.r_inner**2

    def layer_of_interval(za, zbnd):
        mid = 0.5 * (za + zbnd)
        if z1 <= mid < z2:
            return LAYER_RPE
        if z3 <= mid < z4:
            return LAYER_CH
        return -1

    node, const, zs, layer = [], [], [], []
    z_nodes = geom.z_nodes
    for a in range(len(z_nodes) - 1):
        za, zbnd = z_nodes[a], z_nodes[a + 1]
        if za < zb - 1e-15 or zbnd > ze + 1e-15:
            continue
        lay = layer_of_interval(za, zbnd)
        if lay < 0:
            continue  # mu = 0 there, no contribution
        h = zbnd - za
        for z_end_pt, iz in ((za, a), (zbnd, a + 1)):
            if iz == 0 or iz == len(z_nodes) - 1:
                continue  # Dirichlet plane, T = 0
            for ir in range(geom.n_r_inner + 1):
                k = iz - 1
                node.append(disc.idx_grid[ir, k])
                const.append(0.5 * h * wr[ir])
                zs.append(z_end_pt)
                layer.append(lay)

    return BeerLambertTerms(
        node, const, zs, layer, stack.absorbing_intervals,
        np.array([absorption.mu0_rpe, absorption.mu0_ch]),
        disc.n,
    )


def peak_row(skeleton: OperatorSkeleton) -> np.ndarray:
    """Selector row for the node at r = 0, z = RPE center."""
    disc = skeleton.disc
    (z1, z2), _ = disc.geometry.stack.absorbing_intervals
    i = disc.node_at(0.0, 0.5 * (z1 + z2))
    row = np.zeros(disc.n)
    row[i] = 1.0
    return row


def assemble_outputs(skeleton: OperatorSkeleton, absorption: AbsorptionParams,
                     z_range: tuple[float, float] | None = None):
    """(c_vol terms, c_peak row) for the model outputs."""
    return output_terms(skeleton, absorption, z_range), peak_row(skeleton)


# ---------------------------------------------------------------------------
# full-order model
# ---------------------------------------------------------------------------

@dataclass
class FullOrderModel:
    """Sparse full-order thermal model with alpha-dependent maps.

    A is Hurwitz (Dirichlet heat operator); b(alpha) is supported on the
    irradiated absorbing nodes; c_vol(alpha) is a nonnegative quadrature
    row; c_peak selects the RPE-center node.
    """

    A: sp.csr_matrix
    b_terms: BeerLambertTerms
    c_terms: BeerLambertTerms
    c_peak: np.ndarray
    disc: Discretization
    material: MaterialProps
    absorption: AbsorptionParams
    domain: ParameterDomain
    config_hash: str = ""

    @property
    def n_f(self) -> int:
        return self.disc.n

    @property
    def stack(self) -> LayerStack:
        return self.disc.geometry.stack

    def b(self, alpha) -> np.ndarray:
        return self.b_terms.assemble(self._alpha2(alpha))

    def c_vol(self, alpha) -> np.ndarray:
        return self.c_terms.assemble(self._alpha2(alpha))

    def _alpha2(self, alpha) -> np.ndarray:
        alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
        if alpha.size == 1:
            return np.array([alpha[0], self.absorption.alpha_ch])
        return alpha

    def steady_state(self, alpha, u: float) -> np.ndarray:
        return spla.spsolve(-self.A.tocsc(), self.b(alpha) * u)


def build_full_model(cfg: dict) -> FullOrderModel:
    """Assemble the full-order model from a config dict."""
    from .config import config_hash

    stack = layers_from_config(cfg["layers"])
    geo_cfg = cfg["geometry"]
    stack, geom = build_geometry(
        stack, GridSpec(geo_cfg["n_r"], geo_cfg["n_z"]),
        r_inner=geo_cfg["spot_radius_m"],
        outer_radius_factor=geo_cfg["outer_radius_factor"],
    )
    mat_cfg = cfg["material"]
    material = MaterialProps(mat_cfg["density_kg_m3"],
                             mat_cfg["heat_capacity_J_kgK"],
                             mat_cfg["conductivity_W_mK"])
    ab = cfg["absorption"]
    absorption = AbsorptionParams(ab["alpha_rpe_mean"], ab["alpha_ch_mean"],
                                  ab["mu0_rpe"], ab["mu0_ch"])
    domain = ParameterDomain(
        np.array([ab["alpha_rpe_bounds"][0], ab["alpha_ch_bounds"][0]]),
        np.array([ab["alpha_rpe_bounds"][1], ab["alpha_ch_bounds"][1]]),
    )
    skeleton = assemble_operator(geom, material)
    b_terms = source_terms(skeleton, absorption)
    c_terms, c_pk = assemble_outputs(skeleton, absorption)
    return FullOrderModel(
        A=skeleton.A, b_terms=b_terms, c_terms=c_terms, c_peak=c_pk,
        disc=skeleton.disc, material=material, absorption=absorption,
        domain=domain, config_hash=config_hash(cfg),
    )


# ---------------------------------------------------------------------------
# time integration
# ---------------------------------------------------------------------------

@dataclass
class FullSimResult:
    t: np.ndarray
    states: np.ndarray   # (K+1, n_f)
    t_vol: np.ndarray
    t_peak: np.ndarray
    u: np.ndarray


def simulate_full(model: FullOrderModel, alpha, u, t_final: float,
                  dt: float, store_states: bool = True) -> FullSimResult:
    """Implicit-Euler integration of the full model from the zero state.

    `u` is a constant power (W) or an array of per-step powers; step k
    uses u_k, i.e. x_{k+1} = (I - dt A)^{-1} (x_k + dt b(alpha) u_k).
    """
    if dt <= 0:
        raise ValidationError("dt must be positive")
    n_steps = int(round(t_final / dt))
    u_seq = np.broadcast_to(np.asarray(u, dtype=float), (n_steps,)).copy()
    if np.any(u_seq < 0):
        raise ValidationError("laser power must be nonnegative")

    alpha2 = model._alpha2(alpha)
    b = model.b_terms.assemble(alpha2)
    c_vol = model.c_terms.assemble(alpha2)
    lu = spla.splu(sp.eye(model.n_f, format="csc") - dt * model.A.tocsc())

    x = np.zeros(model.n_f)
    t_vol = np.zeros(n_steps + 1)
    t_peak = np.zeros(n_steps + 1)
    states = np.zeros((n_steps + 1, model.n_f)) if store_states else None
    for k in range(n_steps):
        x = lu.solve(x + dt * b * u_seq[k])
        if not np.all(np.isfinite(x)):
            raise SolverFailure(f"non-finite state at step {k + 1}")
        t_vol[k + 1] = c_vol @ x
        t_peak[k + 1] = model.c_peak @ x
        if store_states:
            states[k + 1] = x
    t = dt * np.arange(n_steps + 1)
    u_full = np.concatenate([u_seq, [u_seq[-1] if n_steps else 0.0]])
    return FullSimResult(t=t, states=states, t_vol=t_vol, t_peak=t_peak, u=u_full)


def write_trace_csv(path, result: FullSimResult) -> None:
    """Trace CSV with header t,u,T_vol,T_peak in SI units."""
    data = np.column_stack([result.t, result.u, result.t_vol, result.t_peak])
    np.savetxt(path, data, fmt="%.9e", delimiter=",",
               header="t,u,T_vol,T_peak", comments="")
