"""Scene geometry: enclosure walls, rotating perturbers, RIS and antennas.

A :class:`SceneSpec` is the static description of the environment. It is
turned into a concrete list of dipoles for a RIS configuration ``C`` and a
perturber orientation ``theta`` by :func:`instantiate`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import physics
from .exceptions import FormatError, InvalidArgumentError
from .physics import DipoleProperties

TWO_PI = 2.0 * math.pi
N_RIS_ELEMENTS = 100
N_MACROPIXELS = 25
MACROPIXEL_SIZE = 4
SCENE_SCHEMA = "risadapt.scene"
SCENE_VERSION = 1
ANTENNA_NAMES = ("tx", "rx", "ar")
# Lossless scatterers resonating above the band. Environment dipoles are nearly
# transparent and would leave the channel almost independent of theta.
PERTURBER_MATERIAL = DipoleProperties(f_res=2.0, chi=3.0, gamma_loss=0.0)


def canonical_angle(theta):
    """Map an angle (or array of angles) onto ``[0, 2 pi)``."""
    t = np.mod(np.asarray(theta, dtype=float), TWO_PI)
    t = np.where(t >= TWO_PI, 0.0, t)
    return float(t) if t.ndim == 0 else t


def arc_length_distance(a, b):
    """Geodesic distance between angles on the unit circle, in ``[0, pi]``."""
    d = np.mod(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)), TWO_PI)
    out = np.minimum(d, TWO_PI - d)
    return float(out) if out.ndim == 0 else out


def wrapped_difference(a, b):
    """Signed difference ``a - b`` wrapped into ``[-pi, pi)``."""
    return np.mod(np.asarray(a) - np.asarray(b) + math.pi, TWO_PI) - math.pi


@dataclass(frozen=True)
class RisConfiguration:
    """Macro-pixel control bits ``C``; one bit switches four RIS elements."""

    bits: tuple[int, ...]

    def __post_init__(self):
        bits = tuple(int(b) for b in np.asarray(self.bits).ravel())
        if any(b not in (0, 1) for b in bits):
            raise InvalidArgumentError(f"RIS bits must be 0 or 1, got {self.bits}")
        object.__setattr__(self, "bits", bits)

    def __len__(self):
        return len(self.bits)

    def as_array(self) -> np.ndarray:
        return np.array(self.bits, dtype=np.uint8)

    def expand(self, macropixel_map) -> np.ndarray:
        """Per-element ON/OFF state for the element ordering of ``macropixel_map``."""
        n = sum(len(g) for g in macropixel_map)
        state = np.zeros(n, dtype=np.uint8)
        for bit, group in zip(self.bits, macropixel_map):
            state[list(group)] = bit
        return state

    def flipped(self, index: int) -> "RisConfiguration":
        bits = list(self.bits)
        bits[index] ^= 1
        return RisConfiguration(tuple(bits))


@dataclass(frozen=True)
class PerturberState:
    """Shared rotation angle of the perturbers, canonicalized to ``[0, 2 pi)``."""

    theta: float

    def __post_init__(self):
        if not math.isfinite(self.theta):
            raise InvalidArgumentError(f"theta must be finite, got {self.theta}")
        object.__setattr__(self, "theta", canonical_angle(self.theta))


def random_config(rng: np.random.Generator, n_bits: int = N_MACROPIXELS) -> RisConfiguration:
    """Draw ``n_bits`` independent fair bits."""
    return RisConfiguration(tuple(rng.integers(0, 2, size=n_bits)))


@dataclass(frozen=True)
class Perturber:
    center: np.ndarray
    offsets: np.ndarray  # body-frame positions relative to ``center``

    def positions(self, theta: float) -> np.ndarray:
        c, s = math.cos(theta), math.sin(theta)
        rot = np.array([[c, -s], [s, c]])
        return self.center + self.offsets @ rot.T


def _readonly(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def wall_dipole_positions(vertices: np.ndarray, spacing: float) -> np.ndarray:
    """Dipoles along each polygon edge with spacing at most ``spacing``."""
    pts = []
    n = len(vertices)
    for i in range(n):
        a, b = vertices[i], vertices[(i + 1) % n]
        m = max(1, math.ceil(np.hypot(*(b - a)) / spacing))
        t = np.arange(m) / m
        pts.append(a + t[:, None] * (b - a))
    return np.concatenate(pts)


@dataclass(frozen=True)
class SceneSpec:
    wall_vertices: np.ndarray
    wall_spacing: float
    perturbers: tuple[Perturber, ...]
    ris_element_positions: np.ndarray
    macropixel_map: tuple[tuple[int, ...], ...]
    antennas: dict
    materials: dict
    ris_on: DipoleProperties = physics.RIS_ON
    ris_off: DipoleProperties = physics.RIS_OFF
    _walls: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "wall_vertices", _readonly(self.wall_vertices))
        object.__setattr__(self, "ris_element_positions", _readonly(self.ris_element_positions))
        object.__setattr__(self, "perturbers", tuple(
            Perturber(_readonly(p.center), _readonly(p.offsets)) for p in self.perturbers))
        object.__setattr__(self, "macropixel_map", tuple(
            tuple(int(i) for i in g) for g in self.macropixel_map))
        object.__setattr__(self, "antennas", {
            k: _readonly(self.antennas[k]) for k in ANTENNA_NAMES})
        object.__setattr__(self, "_walls", _readonly(
            wall_dipole_positions(self.wall_vertices, self.wall_spacing)))
        self.validate()

    def validate(self):
        if len(self.ris_element_positions) != N_RIS_ELEMENTS:
            raise InvalidArgumentError(
                f"expected {N_RIS_ELEMENTS} RIS elements, got {len(self.ris_element_positions)}")
        flat = sorted(i for g in self.macropixel_map for i in g)
        if (len(self.macropixel_map) != N_MACROPIXELS or flat != list(range(N_RIS_ELEMENTS))
                or any(len(g) != MACROPIXEL_SIZE for g in self.macropixel_map)):
            raise InvalidArgumentError(
                "macropixel_map must partition the RIS elements into 25 groups of 4")
        for name in ANTENNA_NAMES:
            if not point_in_polygon(self.antennas[name], self.wall_vertices):
                raise InvalidArgumentError(f"antenna {name!r} lies outside the enclosure")
        if any(len(p.offsets) == 0 for p in self.perturbers):
            raise InvalidArgumentError("perturbers need at least one dipole")
        if self.wall_spacing <= 0:
            raise InvalidArgumentError("wall_spacing must be positive")
        for kind in ("antenna", "wall", "perturber"):
            if kind not in self.materials:
                raise InvalidArgumentError(f"missing material for {kind!r}")

    @property
    def wall_positions(self) -> np.ndarray:
        return self._walls

    @property
    def n_bits(self) -> int:
        return len(self.macropixel_map)

    @property
    def n_dipoles(self) -> int:
        return (len(self._walls) + sum(len(p.offsets) for p in self.perturbers)
                + N_RIS_ELEMENTS + len(ANTENNA_NAMES))

    def perturber_positions(self, theta: float) -> np.ndarray:
        if not self.perturbers:
            return np.zeros((0, 2))
        return np.concatenate([p.positions(theta) for p in self.perturbers])

    def antenna_positions(self) -> np.ndarray:
        return np.array([self.antennas[k] for k in ANTENNA_NAMES])

    # JSON -----------------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "schema": SCENE_SCHEMA,
            "version": SCENE_VERSION,
            "wall_vertices": self.wall_vertices.tolist(),
            "wall_spacing": float(self.wall_spacing),
            "perturbers": [{"center": p.center.tolist(), "offsets": p.offsets.tolist()}
                           for p in self.perturbers],
            "ris_element_positions": self.ris_element_positions.tolist(),
            "macropixel_map": [list(g) for g in self.macropixel_map],
            "antennas": {k: self.antennas[k].tolist() for k in ANTENNA_NAMES},
            "materials": {k: v.to_dict() for k, v in sorted(self.materials.items())},
            "ris_on": self.ris_on.to_dict(),
            "ris_off": self.ris_off.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        if d.get("schema") != SCENE_SCHEMA:
            raise FormatError(f"not a scene file (schema={d.get('schema')!r})")
        if d.get("version") != SCENE_VERSION:
            raise FormatError(f"unsupported scene version {d.get('version')!r}")
        try:
            return cls(
                wall_vertices=d["wall_vertices"],
                wall_spacing=float(d["wall_spacing"]),
                perturbers=tuple(Perturber(np.array(p["center"], float), np.array(p["offsets"], float))
                                 for p in d["perturbers"]),
                ris_element_positions=d["ris_element_positions"],
                macropixel_map=d["macropixel_map"],
                antennas=d["antennas"],
                materials={k: DipoleProperties(**v) for k, v in d["materials"].items()},
                ris_on=DipoleProperties(**d["ris_on"]),
                ris_off=DipoleProperties(**d["ris_off"]),
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed scene file: {exc!r}") from exc

    def to_json(self, manifest: dict | None = None) -> str:
        d = self.to_dict()
        if manifest is not None:
            d["manifest"] = manifest
        return dumps_exact(d) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"scene file is not valid JSON: {exc}") from exc
        return cls.from_dict(d)

    def save(self, path, manifest=None):
        Path(path).write_text(self.to_json(manifest))

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_json(Path(path).read_text())


def dumps_exact(obj, indent: int = 1, _level: int = 0) -> str:
    """JSON encoder writing every float with 17 significant digits."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, bool) or obj is None or isinstance(obj, (str, int)) and not isinstance(obj, float):
        return json.dumps(obj)
    if isinstance(obj, float):
        if not math.isfinite(obj):
            raise ValueError("non-finite float in scene JSON")
        return f"{obj:.17g}" if ("e" in f"{obj:.17g}" or "." in f"{obj:.17g}") else f"{obj:.17g}.0"
    if isinstance(obj, dict):
        items = [f"{pad}{json.dumps(str(k))}: {dumps_exact(v, indent, _level + 1)}"
                 for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}" if items else "{}"
    if isinstance(obj, (list, tuple)):
        if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(dumps_exact(v, indent, _level + 1) for v in obj) + "]"
        items = [pad + dumps_exact(v, indent, _level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]" if items else "[]"
    raise TypeError(f"cannot encode {type(obj).__name__}")


@dataclass(frozen=True)
class SceneInstance:
    """Concrete dipole list for one ``(C, theta)``.

    Dipoles are ordered walls, perturbers, RIS elements, antennas.
    """

    positions: np.ndarray
    properties: tuple[DipoleProperties, ...]
    kinds: tuple[str, ...]
    antenna_index: dict

    @property
    def dipoles(self) -> list[physics.Dipole]:
        return [physics.Dipole(tuple(p), props, kind)
                for p, props, kind in zip(self.positions.tolist(), self.properties, self.kinds)]

    def indices(self, kind: str) -> np.ndarray:
        return np.array([i for i, k in enumerate(self.kinds) if k == kind], dtype=int)

    def subset(self, keep) -> "SceneInstance":
        """Instance restricted to the dipoles in ``keep`` (antenna indices remapped)."""
        keep = [int(i) for i in keep]
        where = {old: new for new, old in enumerate(keep)}
        return SceneInstance(
            self.positions[keep], tuple(self.properties[i] for i in keep),
            tuple(self.kinds[i] for i in keep),
            {k: where[v] for k, v in self.antenna_index.items() if v in where})

    def permuted(self, order) -> "SceneInstance":
        return self.subset(order)


def instantiate(spec: SceneSpec, c: RisConfiguration, state: PerturberState) -> SceneInstance:
    if len(c) != spec.n_bits:
        raise InvalidArgumentError(f"configuration has {len(c)} bits, scene expects {spec.n_bits}")
    theta = state.theta if isinstance(state, PerturberState) else canonical_angle(state)
    walls = spec.wall_positions
    pert = spec.perturber_positions(theta)
    ris = spec.ris_element_positions
    ant = spec.antenna_positions()
    positions = np.concatenate([walls, pert, ris, ant])
    on = c.expand(spec.macropixel_map)
    props = ((spec.materials["wall"],) * len(walls)
             + (spec.materials["perturber"],) * len(pert)
             + tuple(spec.ris_on if b else spec.ris_off for b in on)
             + (spec.materials["antenna"],) * len(ant))
    kinds = (("wall",) * len(walls) + ("perturber",) * len(pert)
             + ("ris",) * len(ris) + ("antenna",) * len(ant))
    base = len(positions) - len(ant)
    physics.check_separation(positions)
    return SceneInstance(positions, props, kinds,
                         {name: base + i for i, name in enumerate(ANTENNA_NAMES)})


# ---------------------------------------------------------------------------
# Scene generation


def point_in_polygon(p, vertices) -> bool:
    x, y = float(p[0]), float(p[1])
    inside = False
    n = len(vertices)
    for i in range(n):
        x1, y1 = vertices[i]
        x2, y2 = vertices[(i + 1) % n]
        if (y1 > y) != (y2 > y):
            xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x < xc:
                inside = not inside
    return inside


def distance_to_polygon(p, vertices) -> float:
    p = np.asarray(p, dtype=float)
    a = np.asarray(vertices, dtype=float)
    b = np.roll(a, -1, axis=0)
    ab = b - a
    t = np.clip(np.einsum("ij,ij->i", p - a, ab) / np.einsum("ij,ij->i", ab, ab), 0, 1)
    closest = a + t[:, None] * ab
    return float(np.min(np.hypot(*(closest - p).T)))


@dataclass(frozen=True)
class SceneLayout:
    """Knobs of the seeded scene generator."""

    width: float = 15.0
    height: float = 10.0
    n_side_points: int = 2  # extra jittered vertices per rectangle side
    jitter: float = 0.7
    wall_spacing: float = 0.3
    ris_spacing: float = 0.4
    ris_inset: float = 0.25
    corner_margin: float = 0.3
    perturber_dipoles: tuple[int, int] = (8, 12)
    perturber_radius: tuple[float, float] = (0.5, 1.0)
    perturber_min_spacing: float = 0.2


PAPER_LAYOUT = SceneLayout()
DESK_LAYOUT = SceneLayout(width=13.0, height=9.0, n_side_points=1, jitter=0.45,
                          perturber_dipoles=(8, 8), perturber_radius=(0.5, 0.7))
LAYOUTS = {"paper": PAPER_LAYOUT, "desk": DESK_LAYOUT}


def _irregular_polygon(rng, layout: SceneLayout) -> np.ndarray:
    w, h, j = layout.width, layout.height, layout.jitter
    corners = np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=float)
    verts = []
    for i in range(4):
        a, b = corners[i], corners[(i + 1) % 4]
        verts.append(a + rng.uniform(-j, j, size=2) * 0.5)
        edge = b - a
        normal = np.array([-edge[1], edge[0]]) / np.hypot(*edge)
        ts = np.sort(rng.uniform(0.2, 0.8, size=layout.n_side_points))
        for t in ts:
            verts.append(a + t * edge + normal * rng.uniform(-j, j))
    v = np.array(verts)
    return v - v.mean(axis=0)


def _place_ris(rng, vertices, layout: SceneLayout):
    """Single runs of elements along consecutive edges, starting at a random edge.

    Elements are ordered along the wall path, so each macro-pixel is four
    neighbouring elements of one run (or of two runs meeting at a corner).
    Slots that would crowd an earlier run or a neighbouring wall are skipped.
    """
    s, margin = layout.ris_spacing, layout.corner_margin
    n = len(vertices)
    first = int(rng.integers(n))
    placed = []
    for k in range(n):
        e = (first + k) % n
        a, b = vertices[e], vertices[(e + 1) % n]
        length = float(np.hypot(*(b - a)))
        if length <= 2 * margin:
            continue
        tangent = (b - a) / length
        inward = np.array([-tangent[1], tangent[0]])
        n_slots = int(math.floor((length - 2 * margin) / s + 1e-9)) + 1
        start = margin + rng.uniform(0, length - 2 * margin - (n_slots - 1) * s)
        for i in range(n_slots):
            p = a + tangent * (start + i * s) + inward * layout.ris_inset
            if distance_to_polygon(p, vertices) < layout.ris_inset - 1e-9:
                continue
            if placed and np.min(np.hypot(*(np.array(placed) - p).T)) < s - 1e-9:
                continue
            placed.append(p)
            if len(placed) == N_RIS_ELEMENTS:
                groups = [tuple(range(g * MACROPIXEL_SIZE, (g + 1) * MACROPIXEL_SIZE))
                          for g in range(N_MACROPIXELS)]
                return np.array(placed), groups
    raise _PlacementError


def has_rotational_symmetry(offsets: np.ndarray, tol: float = 1e-6, n_grid: int = 3600) -> bool:
    """True if some rotation ``0 < theta < 2 pi`` maps the point set onto itself."""
    offsets = np.asarray(offsets, dtype=float)
    radii = np.hypot(*offsets.T)
    angles = np.arctan2(offsets[:, 1], offsets[:, 0])
    # any symmetry maps point 0 onto a point of equal radius
    candidates = [angles[j] - angles[0] for j in range(1, len(offsets))
                  if abs(radii[j] - radii[0]) < tol]
    candidates += list(np.arange(1, n_grid) * TWO_PI / n_grid)
    for th in candidates:
        if arc_length_distance(th, 0.0) < 1e-9:
            continue
        c, s = math.cos(th), math.sin(th)
        rotated = offsets @ np.array([[c, -s], [s, c]]).T
        d = physics.pairwise_distances(rotated, offsets)
        if np.all(d.min(axis=1) < tol):
            return True
    return False


def _random_offsets(rng, layout: SceneLayout) -> np.ndarray:
    lo, hi = layout.perturber_dipoles
    n = int(rng.integers(lo, hi + 1))
    radius = rng.uniform(*layout.perturber_radius)
    for _ in range(1000):
        pts = []
        while len(pts) < n:
            r = radius * math.sqrt(rng.uniform(0.05, 1.0))
            phi = rng.uniform(0, TWO_PI)
            p = np.array([r * math.cos(phi), r * math.sin(phi)])
            if all(np.hypot(*(p - q)) >= layout.perturber_min_spacing for q in pts):
                pts.append(p)
        pts = np.array(pts)
        if not has_rotational_symmetry(pts):
            return pts
    raise RuntimeError("could not draw an asymmetric perturber")  # pragma: no cover


def _draw_interior_point(rng, vertices, clearance, avoid=()):
    lo, hi = vertices.min(axis=0), vertices.max(axis=0)
    for _ in range(20000):
        p = rng.uniform(lo, hi)
        if not point_in_polygon(p, vertices) or distance_to_polygon(p, vertices) < clearance:
            continue
        if all(np.hypot(*(p - q)) >= r for q, r in avoid):
            return p
    raise _PlacementError


def default_scene(seed: int = 0, layout: SceneLayout | str = "paper") -> SceneSpec:
    """Seeded irregular enclosure with four rotating perturbers and a 100-element RIS.

    ``layout`` selects the geometry size: ``"paper"`` (about 15 x 10 units)
    or ``"desk"`` (about 9 x 6 units, roughly 200 dipoles in total).
    """
    if isinstance(layout, str):
        try:
            layout = LAYOUTS[layout]
        except KeyError:
            raise InvalidArgumentError(f"unknown layout {layout!r}") from None
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5CE7E]))
    for _ in range(50):
        try:
            return _generate(rng, layout)
        except _PlacementError:
            continue
    raise InvalidArgumentError(f"could not generate a scene for seed {seed}")


class _PlacementError(Exception):
    pass


def _generate(rng, layout: SceneLayout) -> SceneSpec:
    vertices = _irregular_polygon(rng, layout)
    ris, groups = _place_ris(rng, vertices, layout)
    ris_clear = layout.ris_inset
    avoid = []
    antennas = {}
    for name in ANTENNA_NAMES:
        p = _draw_interior_point(rng, vertices, ris_clear + 0.75, avoid)
        antennas[name] = p
        avoid.append((p, 1.5))
    perturbers = []
    for _ in range(4):
        offsets = _random_offsets(rng, layout)
        r = float(np.max(np.hypot(*offsets.T)))
        center = _draw_interior_point(
            rng, vertices, ris_clear + r + 0.35,
            [(q, rq + r + 0.35) for q, rq in
             [(a, 0.0) for a in antennas.values()] + [(p.center, p_r) for p, p_r in perturbers]])
        perturbers.append((Perturber(center, offsets), r))
    return SceneSpec(
        wall_vertices=vertices,
        wall_spacing=layout.wall_spacing,
        perturbers=tuple(p for p, _ in perturbers),
        ris_element_positions=ris,
        macropixel_map=groups,
        antennas=antennas,
        materials={"antenna": physics.TRANSCEIVER, "wall": physics.ENVIRONMENT,
                   "perturber": PERTURBER_MATERIAL},
    )
