"""
Backend registry: resolves configured backend ids to adapter instances.

Adapters are either built-in names or `python:<module>:<Class>`; the latter are
imported only when selected so real model stacks stay optional.
"""

import importlib
import logging
from typing import Optional, Type, TypeVar

from backends.base import (
    Backend,
    CaptionBackend,
    ConditionedGeneratorBackend,
    DepthEstimatorBackend,
    DepthModelBackend,
)
from backends.mocks import (
    BiasedMockDepthEstimator,
    GreenChannelDepthEstimator,
    GreenChannelDepthModel,
    MockCaptioner,
    MockConditionedGenerator,
    MockDepthEstimator,
    OracleDepthModel,
)
from schemas.configs import BackendSpec
from utils.errors import ConfigError, UnknownBackend

logger = logging.getLogger("pipeline.stdout")

B = TypeVar("B", bound=Backend)

ADAPTERS: dict[str, Type[Backend]] = {
    "mock-luminance": MockDepthEstimator,
    "mock-biased": BiasedMockDepthEstimator,
    "mock-green-depth": GreenChannelDepthEstimator,
    "mock-caption": MockCaptioner,
    "mock-generator": MockConditionedGenerator,
    "mock-green-model": GreenChannelDepthModel,
    "oracle-depth-model": OracleDepthModel,
}


def default_backend_specs() -> dict[str, BackendSpec]:
    """
    One entry per built-in adapter, registered under the adapter's own name.
    """
    return {name: BackendSpec(adapter=name) for name in ADAPTERS}


def load_adapter(adapter: str) -> Type[Backend]:
    """
    Raises:
        ConfigError: If the adapter is unknown or cannot be imported.
    """
    if adapter in ADAPTERS:
        return ADAPTERS[adapter]
    if not adapter.startswith("python:"):
        raise ConfigError(f"unknown backend adapter '{adapter}'")
    try:
        _, module_name, class_name = adapter.split(":", 2)
        cls = getattr(importlib.import_module(module_name), class_name)
    except (ValueError, ImportError, AttributeError) as e:
        raise ConfigError(f"cannot load backend adapter '{adapter}': {e}") from e
    if not (isinstance(cls, type) and issubclass(cls, Backend)):
        raise ConfigError(f"adapter '{adapter}' is not a Backend subclass")
    return cls


class BackendRegistry:
    """
    Lazily instantiates backends by id and caches one instance per id, so the
    per-instance call and train locks are shared by every stage of a run.
    """

    def __init__(self, specs: Optional[dict[str, BackendSpec]] = None):
        self.specs = dict(default_backend_specs())
        self.specs.update(specs or {})
        self._instances: dict[str, Backend] = {}

    def register(self, backend: Backend):
        """
        Adds an already constructed backend under its own id.
        """
        self._instances[backend.id] = backend

    def validate(self):
        """
        Resolves every configured adapter without instantiating it.

        Raises:
            ConfigError: If an adapter cannot be resolved.
        """
        for spec in self.specs.values():
            load_adapter(spec.adapter)

    def get(self, backend_id: str, expected: Type[B] = Backend) -> B:
        """
        Returns the backend registered under `backend_id`.

        Raises:
            UnknownBackend: If no backend is configured under that id, or it does not
                implement the expected role.
            ConfigError: If its adapter cannot be loaded or constructed.
        """
        backend = self._instances.get(backend_id)
        if backend is None:
            spec = self.specs.get(backend_id)
            if spec is None:
                raise UnknownBackend("no backend registered under this id", backend_id=backend_id)
            cls = load_adapter(spec.adapter)
            try:
                backend = cls(backend_id=backend_id, **spec.params)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"cannot construct backend '{backend_id}': {e}") from e
            if spec.reentrant is not None:
                backend.reentrant = spec.reentrant
            logger.debug(f"Instantiated backend {backend_id} ({spec.adapter})")
            self._instances[backend_id] = backend
        if not isinstance(backend, expected):
            raise UnknownBackend(f"backend is not a {expected.__name__}", backend_id=backend_id)
        return backend

    def estimator(self, backend_id: str) -> DepthEstimatorBackend:
        return self.get(backend_id, DepthEstimatorBackend)

    def captioner(self, backend_id: str) -> CaptionBackend:
        return self.get(backend_id, CaptionBackend)

    def generator(self, backend_id: str) -> ConditionedGeneratorBackend:
        return self.get(backend_id, ConditionedGeneratorBackend)

    def depth_model(self, backend_id: str) -> DepthModelBackend:
        return self.get(backend_id, DepthModelBackend)
