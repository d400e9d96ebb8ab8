"""
Style-conditioned linear maps
A CondWeight is either a dense out x in x S tensor or the factorization Wa diag(Wb y) Wc
"""
import threading
from typing import Dict, Optional, Tuple

import numpy as np

from engine.errors import ShapeError


class MacCounter:
    """
    Multiply-add counter for conditional weight products and their gradients
    Shared by worker threads, so updates hold a lock
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.count = 0

    def add(self, amount: int):
        with self._lock:
            self.count += int(amount)

    def reset(self):
        with self._lock:
            self.count = 0


MACS = MacCounter()


def _flatten(X: np.ndarray, Y: np.ndarray, in_dim: int, styles: int) -> Tuple[np.ndarray, np.ndarray, tuple]:
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape[-1] != in_dim:
        raise ShapeError(f"input has {X.shape[-1]} columns, weight expects {in_dim}", ["in_dim"])
    if Y.shape[-1] != styles:
        raise ShapeError(f"side information has {Y.shape[-1]} columns, weight expects {styles}", ["styles"])
    if X.shape[:-1] != Y.shape[:-1]:
        raise ShapeError(f"leading shapes differ: {X.shape[:-1]} vs {Y.shape[:-1]}", ["batch"])
    lead = X.shape[:-1]
    return X.reshape(-1, in_dim), Y.reshape(-1, styles), lead


class CondWeight:
    """
    Base class for a linear map whose matrix depends on the side vector y
    """

    out_dim: int
    in_dim: int
    styles: int

    @property
    def factored(self) -> bool:
        raise NotImplementedError

    @property
    def num_params(self) -> int:
        raise NotImplementedError

    def apply(self, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        """
        Evaluate W(y_i) x_i for every row

        Args:
            X: Inputs, shape (..., in_dim)
            Y: Side vectors, shape (..., S)

        Returns:
            Outputs, shape (..., out_dim)
        """
        raise NotImplementedError

    def effective(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gradients(self, xi: np.ndarray, X: np.ndarray, Y: np.ndarray, prefix: str) -> Dict[str, np.ndarray]:
        """
        Gradient of sum_i xi_i . W(y_i) x_i with respect to every stored tensor

        Args:
            xi: Downstream error, shape (..., out_dim)
            X: Inputs, shape (..., in_dim)
            Y: Side vectors, shape (..., S)
            prefix: Tensor name prefix

        Returns:
            Dictionary of gradients keyed like tensors(prefix)
        """
        raise NotImplementedError

    def tensors(self, prefix: str) -> Dict[str, np.ndarray]:
        raise NotImplementedError

    def copy(self) -> "CondWeight":
        raise NotImplementedError

    def _check_xi(self, xi: np.ndarray, lead: tuple) -> np.ndarray:
        xi = np.asarray(xi, dtype=np.float64)
        if xi.shape[-1] != self.out_dim:
            raise ShapeError(f"error signal has {xi.shape[-1]} columns, weight outputs {self.out_dim}", ["out_dim"])
        if xi.shape[:-1] != lead:
            raise ShapeError(f"leading shapes differ: {xi.shape[:-1]} vs {lead}", ["batch"])
        return xi.reshape(-1, self.out_dim)


class DenseWeight(CondWeight):
    """
    Full three-way tensor, one out x in slice per side-information dimension
    """

    def __init__(self, tensor: np.ndarray):
        tensor = np.asarray(tensor, dtype=np.float64)
        if tensor.ndim != 3:
            raise ShapeError(f"dense weight needs a 3-way tensor, got {tensor.ndim} axes", ["out_dim", "in_dim", "styles"])
        self.tensor = tensor
        self.out_dim, self.in_dim, self.styles = tensor.shape

    @classmethod
    def zeros(cls, out_dim: int, in_dim: int, styles: int) -> "DenseWeight":
        return cls(np.zeros((out_dim, in_dim, styles)))

    @classmethod
    def random(cls, out_dim: int, in_dim: int, styles: int, rng: np.random.Generator,
               scale: float = 1e-3) -> "DenseWeight":
        return cls(scale * rng.standard_normal((out_dim, in_dim, styles)))

    @property
    def factored(self) -> bool:
        return False

    @property
    def num_params(self) -> int:
        return self.out_dim * self.in_dim * self.styles

    def _outer(self, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        N = X.shape[0]
        MACS.add(N * self.in_dim * self.styles)
        return (X[:, :, None] * Y[:, None, :]).reshape(N, self.in_dim * self.styles)

    def apply(self, X, Y):
        X2, Y2, lead = _flatten(X, Y, self.in_dim, self.styles)
        P = self._outer(X2, Y2)
        MACS.add(X2.shape[0] * self.out_dim * self.in_dim * self.styles)
        out = P @ self.tensor.reshape(self.out_dim, -1).T
        return out.reshape(lead + (self.out_dim,))

    def effective(self, y):
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (self.styles,):
            raise ShapeError(f"side vector has shape {y.shape}, weight expects ({self.styles},)", ["styles"])
        return self.tensor @ y

    def gradients(self, xi, X, Y, prefix):
        X2, Y2, lead = _flatten(X, Y, self.in_dim, self.styles)
        xi2 = self._check_xi(xi, lead)
        P = self._outer(X2, Y2)
        MACS.add(X2.shape[0] * self.out_dim * self.in_dim * self.styles)
        grad = (xi2.T @ P).reshape(self.out_dim, self.in_dim, self.styles)
        return {prefix: grad}

    def tensors(self, prefix):
        return {prefix: self.tensor}

    def copy(self):
        return DenseWeight(self.tensor.copy())


class FactoredWeight(CondWeight):
    """
    W(y) = Wa diag(Wb y) Wc with Wa: out x F, Wb: F x S, Wc: F x in
    """

    def __init__(self, Wa: np.ndarray, Wb: np.ndarray, Wc: np.ndarray):
        Wa = np.asarray(Wa, dtype=np.float64)
        Wb = np.asarray(Wb, dtype=np.float64)
        Wc = np.asarray(Wc, dtype=np.float64)
        if Wa.ndim != 2 or Wb.ndim != 2 or Wc.ndim != 2:
            raise ShapeError("factor matrices must be 2-D", ["factors"])
        if not (Wa.shape[1] == Wb.shape[0] == Wc.shape[0]):
            raise ShapeError(
                f"factor counts disagree: Wa {Wa.shape}, Wb {Wb.shape}, Wc {Wc.shape}", ["factors"]
            )
        self.Wa, self.Wb, self.Wc = Wa, Wb, Wc
        self.out_dim = Wa.shape[0]
        self.num_factors = Wa.shape[1]
        self.styles = Wb.shape[1]
        self.in_dim = Wc.shape[1]

    @classmethod
    def zeros(cls, out_dim: int, in_dim: int, styles: int, factors: int) -> "FactoredWeight":
        return cls(np.zeros((out_dim, factors)), np.zeros((factors, styles)), np.zeros((factors, in_dim)))

    @classmethod
    def random(cls, out_dim: int, in_dim: int, styles: int, factors: int, rng: np.random.Generator,
               scale: float = 1e-2) -> "FactoredWeight":
        return cls(
            scale * rng.standard_normal((out_dim, factors)),
            scale * rng.standard_normal((factors, styles)),
            scale * rng.standard_normal((factors, in_dim)),
        )

    @property
    def factored(self) -> bool:
        return True

    @property
    def num_params(self) -> int:
        return (self.out_dim + self.in_dim + self.styles) * self.num_factors

    def _projections(self, X2: np.ndarray, Y2: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        N, F = X2.shape[0], self.num_factors
        MACS.add(N * F * (self.styles + self.in_dim))
        return Y2 @ self.Wb.T, X2 @ self.Wc.T

    def apply(self, X, Y):
        X2, Y2, lead = _flatten(X, Y, self.in_dim, self.styles)
        U, Cc = self._projections(X2, Y2)
        MACS.add(X2.shape[0] * self.num_factors * (1 + self.out_dim))
        out = (U * Cc) @ self.Wa.T
        return out.reshape(lead + (self.out_dim,))

    def effective(self, y):
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (self.styles,):
            raise ShapeError(f"side vector has shape {y.shape}, weight expects ({self.styles},)", ["styles"])
        return self.Wa @ ((self.Wb @ y)[:, None] * self.Wc)

    def gradients(self, xi, X, Y, prefix):
        X2, Y2, lead = _flatten(X, Y, self.in_dim, self.styles)
        xi2 = self._check_xi(xi, lead)
        return factored_gradients(self, xi2, X2, Y2, prefix)

    def tensors(self, prefix):
        return {f"{prefix}/Wa": self.Wa, f"{prefix}/Wb": self.Wb, f"{prefix}/Wc": self.Wc}

    def copy(self):
        return FactoredWeight(self.Wa.copy(), self.Wb.copy(), self.Wc.copy())


def factored_gradients(w: FactoredWeight, xi: np.ndarray, X: np.ndarray, Y: np.ndarray,
                       prefix: str = "W") -> Dict[str, np.ndarray]:
    """
    Factor gradients summed over rows.

    dWa = xi (diag(Wb y) Wc x)^T, dWb = ((Wa^T xi) * (Wc x)) y^T,
    dWc = diag(Wb y) Wa^T xi x^T. Inputs are already 2-D.
    """
    N, F = X.shape[0], w.num_factors
    U, Cc = w._projections(X, Y)
    A = xi @ w.Wa
    MACS.add(N * F * (2 * w.out_dim + w.styles + w.in_dim + 2))
    return {
        f"{prefix}/Wa": xi.T @ (U * Cc),
        f"{prefix}/Wb": (A * Cc).T @ Y,
        f"{prefix}/Wc": (U * A).T @ X,
    }


def effective_weight(w: CondWeight, y: np.ndarray) -> np.ndarray:
    """
    Contract a conditional weight with a side vector

    Args:
        w: Dense or factored weight
        y: Side vector of length S

    Returns:
        out_dim x in_dim matrix
    """
    return w.effective(y)


def make_cond_weight(out_dim: int, in_dim: int, styles: int, factored: bool,
                     factors: Optional[int] = None, rng: Optional[np.random.Generator] = None,
                     dense_scale: float = 1e-3, factor_scale: float = 1e-2) -> CondWeight:
    """
    Create a dense or factored weight, zero-filled when rng is None
    """
    if factored:
        if not factors or factors < 1:
            raise ShapeError("factored weights need at least one factor", ["factors"])
        if rng is None:
            return FactoredWeight.zeros(out_dim, in_dim, styles, factors)
        return FactoredWeight.random(out_dim, in_dim, styles, factors, rng, factor_scale)
    if rng is None:
        return DenseWeight.zeros(out_dim, in_dim, styles)
    return DenseWeight.random(out_dim, in_dim, styles, rng, dense_scale)
