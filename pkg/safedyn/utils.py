# safedyn/utils.py
import numpy as np

# Flat parameter vectors are float64 everywhere.
DTYPE = np.float64


class ParamLayout:
    """
    Ordered mapping between named parameter arrays and one flat float64 vector.

    Attributes:
        shapes (dict): Parameter name -> shape tuple, in flattening order.
        size (int): Total number of scalars.

    Example:
        >>> layout = ParamLayout({"W": (2, 3), "b": (3,)})
        >>> vec = layout.flatten({"W": np.ones((2, 3)), "b": np.zeros(3)})
        >>> layout.unflatten(vec)["W"].shape
        (2, 3)
    """

    def __init__(self, shapes):
        self.shapes = {name: tuple(shape) for name, shape in shapes.items()}
        self._slices = {}
        offset = 0
        for name, shape in self.shapes.items():
            n = int(np.prod(shape, dtype=int))
            self._slices[name] = slice(offset, offset + n)
            offset += n
        self.size = offset

    def names(self):
        return list(self.shapes)

    def flatten(self, arrays):
        vec = np.empty(self.size, dtype=DTYPE)
        for name, shape in self.shapes.items():
            value = np.asarray(arrays[name], dtype=DTYPE)
            if value.shape != shape:
                raise ValueError(f"Parameter {name} has shape {value.shape}, expected {shape}.")
            vec[self._slices[name]] = value.ravel()
        return vec

    def unflatten(self, vector):
        vector = np.asarray(vector, dtype=DTYPE)
        if vector.shape != (self.size,):
            raise ValueError(f"Flat vector has shape {vector.shape}, expected ({self.size},).")
        return {name: vector[self._slices[name]].reshape(shape).copy() for name, shape in self.shapes.items()}


def seed_streams(seed, names):
    """
    Derives independent random generators from one seed.

    Args:
        seed (int): Root seed.
        names (list): Stream names; the order fixes which child sequence each name gets.

    Returns:
        dict: name -> np.random.Generator
    """
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


def population_std(values):
    """Standard deviation with ddof=0; 0.0 for a single value."""
    values = np.asarray(values, dtype=DTYPE)
    if values.size == 0:
        raise ValueError("population_std of an empty sequence")
    return float(np.std(values, ddof=0))
