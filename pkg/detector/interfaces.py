from abc import ABC, abstractmethod

import numpy as np


class ProfileFunctionInterface(ABC):
    @property
    @abstractmethod
    def dimension(self) -> int:
        pass

    @abstractmethod
    def __call__(self, X: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def to_dict(self) -> dict:
        pass

    @abstractmethod
    def scaled(self, factor: float) -> "ProfileFunctionInterface":
        pass
