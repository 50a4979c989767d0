import typing
import logging
from dataclasses import dataclass, field

import numpy as np

from detector import interfaces


logger = logging.getLogger(__name__)


class DimensionMismatch(Exception):
    pass


class InvalidProfileFunction(Exception):
    pass


class InvalidNoiseLevel(Exception):
    pass


class InvalidDesign(Exception):
    pass


@dataclass(frozen=True, eq=False)
class Linear(interfaces.ProfileFunctionInterface):
    coeffs: np.ndarray
    intercept: float = 0.0

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=float)
        if coeffs.ndim != 1 or coeffs.size == 0:
            raise InvalidProfileFunction("Coeficientes lineares devem ser um vetor não vazio")
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "intercept", float(self.intercept))

    @property
    def dimension(self) -> int:
        return self.coeffs.size

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return X @ self.coeffs + self.intercept

    def to_dict(self) -> dict:
        return {
            "variant": "linear",
            "coeffs": self.coeffs.tolist(),
            "intercept": self.intercept,
        }

    def scaled(self, factor: float) -> "Linear":
        return Linear(factor * self.coeffs, factor * self.intercept)


@dataclass(frozen=True, eq=False)
class Quadratic(interfaces.ProfileFunctionInterface):
    """Polinômio sem intercepto ``x^T A x + a^T x``."""

    matrix: np.ndarray
    coeffs: np.ndarray = None

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1] or matrix.size == 0:
            raise InvalidProfileFunction("Matriz da forma quadrática deve ser quadrada")
        if self.coeffs is None:
            coeffs = np.zeros(matrix.shape[0])
        else:
            coeffs = np.asarray(self.coeffs, dtype=float)
        if coeffs.shape != (matrix.shape[0],):
            raise DimensionMismatch(
                f"Coeficientes lineares com dimensão {coeffs.shape} para matriz "
                f"{matrix.shape}"
            )
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return np.einsum("ni,ij,nj->n", X, self.matrix, X) + X @ self.coeffs

    def to_dict(self) -> dict:
        return {
            "variant": "quadratic",
            "matrix": self.matrix.tolist(),
            "coeffs": self.coeffs.tolist(),
        }

    def scaled(self, factor: float) -> "Quadratic":
        return Quadratic(factor * self.matrix, factor * self.coeffs)


@dataclass(frozen=True, eq=False)
class ForcingSin(interfaces.ProfileFunctionInterface):
    """``scale * sin(2 pi x1 x2)``"""

    d: int = 3
    scale: float = 1.0

    def __post_init__(self):
        if self.d < 2:
            raise InvalidProfileFunction("Função seno exige ao menos 2 preditores")

    @property
    def dimension(self) -> int:
        return self.d

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return self.scale * np.sin(2 * np.pi * X[:, 0] * X[:, 1])

    def to_dict(self) -> dict:
        return {"variant": "forcing_sin", "d": self.d, "scale": self.scale}

    def scaled(self, factor: float) -> "ForcingSin":
        return ForcingSin(self.d, factor * self.scale)


@dataclass(frozen=True, eq=False)
class ForcingRidge(interfaces.ProfileFunctionInterface):
    """``scale * |x1 - 0.5| exp(-x2) 1{x3 > 0.5}``"""

    d: int = 3
    scale: float = 25.0

    def __post_init__(self):
        if self.d < 3:
            raise InvalidProfileFunction("Função crista exige ao menos 3 preditores")

    @property
    def dimension(self) -> int:
        return self.d

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return (
            self.scale
            * np.abs(X[:, 0] - 0.5)
            * np.exp(-X[:, 1])
            * (X[:, 2] > 0.5)
        )

    def to_dict(self) -> dict:
        return {"variant": "forcing_ridge", "d": self.d, "scale": self.scale}

    def scaled(self, factor: float) -> "ForcingRidge":
        return ForcingRidge(self.d, factor * self.scale)


@dataclass(frozen=True, eq=False)
class Mixture(interfaces.ProfileFunctionInterface):
    """``nu * left + (1 - nu) * right``, sem restrição de nu a [0, 1]."""

    nu: float
    left: interfaces.ProfileFunctionInterface
    right: interfaces.ProfileFunctionInterface

    def __post_init__(self):
        if self.left.dimension != self.right.dimension:
            raise DimensionMismatch(
                f"Componentes da mistura com dimensões {self.left.dimension} "
                f"e {self.right.dimension}"
            )
        object.__setattr__(self, "nu", float(self.nu))

    @property
    def dimension(self) -> int:
        return self.left.dimension

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return self.nu * self.left(X) + (1 - self.nu) * self.right(X)

    def to_dict(self) -> dict:
        return {
            "variant": "mixture",
            "nu": self.nu,
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
        }

    def scaled(self, factor: float) -> "Mixture":
        return Mixture(self.nu, self.left.scaled(factor), self.right.scaled(factor))


ProfileFunction = typing.Union[Linear, Quadratic, ForcingSin, ForcingRidge, Mixture]


def from_dict(data: dict) -> ProfileFunction:
    try:
        variant = data["variant"]
        if variant == "linear":
            return Linear(data["coeffs"], data.get("intercept", 0.0))
        elif variant == "quadratic":
            return Quadratic(data["matrix"], data.get("coeffs"))
        elif variant == "forcing_sin":
            return ForcingSin(int(data.get("d", 3)), float(data.get("scale", 1.0)))
        elif variant == "forcing_ridge":
            return ForcingRidge(int(data.get("d", 3)), float(data.get("scale", 25.0)))
        elif variant == "mixture":
            return Mixture(
                data["nu"], from_dict(data["left"]), from_dict(data["right"])
            )
    except (KeyError, TypeError) as exc:
        raise InvalidProfileFunction(f"Descrição de função inválida: {exc}") from None
    raise InvalidProfileFunction(f"Variante de função desconhecida: {variant}")


@dataclass(frozen=True, eq=False)
class FixedDesign:
    X: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2 or X.shape[0] < 2 or X.shape[1] < 1:
            raise InvalidDesign(f"Desenho deve ser uma matriz n x d com n >= 2: {X.shape}")
        if X.min() < 0 or X.max() > 1:
            raise InvalidDesign("Entradas do desenho devem estar em [0, 1]")
        X.setflags(write=False)
        object.__setattr__(self, "X", X)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True, eq=False)
class ResponseVector:
    y: np.ndarray
    t: int = 0

    def __post_init__(self):
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float))

    def __len__(self):
        return self.y.size


def random_design(n: int, d: int, rng) -> FixedDesign:
    rng = np.random.default_rng(rng)
    return FixedDesign(rng.uniform(0.0, 1.0, size=(n, d)))


def evaluate(fn: ProfileFunction, X: FixedDesign) -> np.ndarray:
    if not isinstance(X, FixedDesign):
        X = FixedDesign(X)
    if fn.dimension != X.d:
        raise DimensionMismatch(
            f"Função de dimensão {fn.dimension} avaliada em desenho com d={X.d}"
        )
    return np.asarray(fn(X.X), dtype=float)


def generate_profile(
    fn: ProfileFunction, X: FixedDesign, sigma: float, rng, t: int = 0
) -> ResponseVector:
    if not sigma > 0:
        raise InvalidNoiseLevel(f"Desvio padrão do ruído deve ser positivo: {sigma}")
    rng = np.random.default_rng(rng)
    mean = evaluate(fn, X)
    return ResponseVector(mean + rng.normal(0.0, sigma, size=mean.size), t)


def generate_stream(
    f: ProfileFunction,
    h: ProfileFunction,
    X: FixedDesign,
    sigma: float,
    tau: int,
    rng,
    start: int = 1,
) -> typing.Iterator[ResponseVector]:
    """Perfis monitorados com média f até tau e h a partir de tau + 1."""
    rng = np.random.default_rng(rng)
    mean_f, mean_h = evaluate(f, X), evaluate(h, X)
    t = start
    while True:
        mean = mean_f if t <= tau else mean_h
        yield ResponseVector(mean + rng.normal(0.0, sigma, size=mean.size), t)
        t += 1


def forcing_pairs() -> typing.List[typing.Tuple[ProfileFunction, ProfileFunction]]:
    linear = Linear([3.0, 2.0, 1.0], 1.0)
    direction = np.array([3.0, 2.0, 1.0])
    quadratic = Quadratic(4.0 / 9.0 * np.outer(direction, direction))
    return [
        (linear, ForcingSin(3, 1.0)),
        (quadratic, ForcingSin(3, 5.0)),
        (linear, ForcingRidge(3, 25.0)),
        (quadratic, ForcingRidge(3, 25.0)),
    ]
