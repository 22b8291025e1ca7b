import numpy as np
import pytest

from app.Model.types import Dataset, ModelSpec, StructuralParams, Variant
from app.serialization import quarter_labels


def make_structural(lam: float = 0.5, alpha: float = 0.0, beta: float = 0.5, gamma: float = 0.2,
                    latent: bool = True) -> StructuralParams:
    """Two-variable VAR(1) with intercept; stable with a policy-rate mean near 0.54."""
    return StructuralParams(
        beta=[beta],
        lam=lam,
        alpha=alpha,
        gamma=[gamma],
        B1=[[0.1, 0.3, 0.05]],
        B12star=[[0.05 if latent else 0.0]],
        B2=[0.1, 0.1, 0.5],
        B22star=[0.3 if latent else 0.0],
        A11inv=[[1.0]],
        A22starinv=0.5,
    )


@pytest.fixture
def structural() -> StructuralParams:
    return make_structural()


@pytest.fixture
def spec() -> ModelSpec:
    return ModelSpec(variant=Variant.CKSVAR, p=1)


@pytest.fixture
def small_dataset() -> Dataset:
    """Six quarters with a single period at the bound (2000Q3)."""
    return Dataset(
        dates=quarter_labels("2000Q1", 6),
        values=np.column_stack([
            [0.2, -0.1, 0.4, 0.1, -0.3, 0.2],
            [0.5, 0.4, 0.0, 0.3, 0.6, 0.5],
        ]),
        bound=0.0,
        names=("y1", "i"),
        constrained_index=1,
    )


def random_dataset(T: int, k: int, seed: int = 0, elb_share: float = 0.2) -> Dataset:
    """Unstructured sample with the last column censored at zero."""
    rng = np.random.default_rng(seed)
    values = rng.standard_normal((T, k))
    values[:, -1] = np.maximum(values[:, -1] + 0.8, 0.0)
    values[rng.random(T) < elb_share, -1] = 0.0
    names = tuple(f"y{j + 1}" for j in range(k - 1)) + ("i",)
    return Dataset(dates=quarter_labels("1990Q1", T), values=values, bound=0.0,
                   names=names, constrained_index=k - 1)
