"""
Backend interfaces for the external models the pipeline orchestrates.

Defines a backend-strategy abstraction per model role:
  * DepthEstimatorBackend - image to inverse relative depth.
  * CaptionBackend - image to descriptive text.
  * ConditionedGeneratorBackend - depth + prompt to image, with a trainable
    conditioning branch over a frozen base generator.
  * DepthModelBackend - trainable image to metric depth network.

Stages never call backend methods directly; they go through `invoke` / `invoke_train`,
which serialize calls on backends that are not reentrant and attach the backend id
and item id to failures.
"""

import logging
import os
import threading
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, TypeVar

from models.rasters import Caption, InverseRelativeDepthMap, MetricDepthMap, RgbImage
from pydantic import BaseModel, Field
from schemas.configs import GenerationConfig, TrainConfig
from utils.errors import BackendFailure, PipelineError

logger = logging.getLogger("pipeline.stdout")

BACKEND_DIR_ENV = "ATLANTIS_BACKEND_DIR"

T = TypeVar("T")

_lock_guard = threading.Lock()


class CheckpointRef(BaseModel):
    """
    Opaque handle to a trained backend state.

    Attributes:
        backend_id (str): Id of the backend that produced it.
        uri (str): Locator understood by that backend.
        config_hash (str): sha256 of the TrainConfig used.
    """

    backend_id: str = Field(min_length=1)
    uri: str = Field(min_length=1)
    config_hash: str = Field(min_length=1)

    model_config = {"frozen": True}


def resolve_checkpoint_uri(uri: str) -> str:
    """
    Prefixes relative filesystem URIs with ATLANTIS_BACKEND_DIR when it is set.
    URIs with a scheme and absolute paths are returned unchanged.
    """
    prefix = os.environ.get(BACKEND_DIR_ENV, "")
    if not prefix or "://" in uri or os.path.isabs(uri):
        return uri
    return str(Path(prefix) / uri)


class Backend(ABC):
    """
    Common backend state.

    Attributes:
        id (str): Registry id.
        reentrant (bool): Whether calls may be issued from several threads at once.
    """

    default_id = "backend"

    def __init__(self, backend_id: Optional[str] = None, reentrant: bool = False):
        self.id = backend_id or self.default_id
        self.reentrant = reentrant


class DepthEstimatorBackend(Backend):
    @abstractmethod
    def estimate(self, image: RgbImage) -> InverseRelativeDepthMap:
        """
        Deterministic inverse relative depth with the image's dimensions.
        """


class CaptionBackend(Backend):
    @abstractmethod
    def caption(self, image: RgbImage) -> Caption:
        """
        Deterministic, nonempty description of the image.
        """


class ConditionedGeneratorBackend(Backend):
    """
    Depth-conditioned generator. `downscale_factor` k means samples are produced at
    1/k of the conditioning resolution.
    """

    downscale_factor: int = 1

    @abstractmethod
    def train(self, triplet_manifest: Path, cfg: TrainConfig) -> CheckpointRef:
        """
        Trains the conditioning branch only; the base generator stays frozen.
        """

    @abstractmethod
    def sample(
        self,
        depth: InverseRelativeDepthMap,
        prompt: str,
        cfg: GenerationConfig,
        seed: int,
        checkpoint: CheckpointRef,
    ) -> RgbImage:
        """
        Deterministic given (checkpoint, depth, prompt, cfg, seed).
        """


class DepthModelBackend(Backend):
    cap_m: float = 20.0

    @abstractmethod
    def train(self, dataset_manifest: Path, cfg: TrainConfig) -> CheckpointRef:
        pass

    @abstractmethod
    def predict(
        self, image: RgbImage, checkpoint: Optional[CheckpointRef] = None
    ) -> MetricDepthMap:
        """
        Metric depth within (0, cap_m], deterministic given the checkpoint.
        """


def _backend_lock(backend: Backend, name: str) -> threading.Lock:
    with _lock_guard:
        lock = backend.__dict__.get(name)
        if lock is None:
            lock = threading.Lock()
            backend.__dict__[name] = lock
        return lock


def _as_failure(error: Exception, backend: Backend, item_id: Optional[str]) -> BackendFailure:
    if isinstance(error, BackendFailure):
        if error.item_id is None and item_id is not None:
            return type(error)(
                error.reason, backend_id=error.backend_id or backend.id, item_id=item_id
            )
        return error
    return BackendFailure(
        f"{type(error).__name__}: {error}", backend_id=backend.id, item_id=item_id
    )


def invoke(
    backend: Backend, method: Callable[..., T], *args: Any, item_id: Optional[str] = None
) -> T:
    """
    Calls a backend method, serialized per instance unless the backend is reentrant.

    Raises:
        BackendFailure: Wrapping any exception the backend raised. Pipeline errors that
            signal a violated contract of the caller's inputs pass through unchanged.
    """
    try:
        if getattr(backend, "reentrant", False):
            return method(*args)
        with _backend_lock(backend, "_call_lock"):
            return method(*args)
    except BackendFailure as e:
        raise _as_failure(e, backend, item_id) from e
    except PipelineError:
        raise
    except Exception as e:
        raise _as_failure(e, backend, item_id) from e


def invoke_train(backend: Backend, method: Callable[..., T], *args: Any) -> T:
    """
    Calls a backend's train method; at most one train runs per instance.
    """
    with _backend_lock(backend, "_train_lock"):
        return invoke(backend, method, *args)


class FaultInjection:
    """
    Mixin for test doubles: calls whose zero-based index is in `fail_call_indices`
    raise BackendFailure.
    """

    def _init_faults(self, fail_call_indices: Optional[Iterable[int]]):
        self.fail_call_indices = set(fail_call_indices or ())
        self._calls = 0
        self._calls_lock = threading.Lock()

    def _next_call(self):
        with self._calls_lock:
            index = self._calls
            self._calls += 1
        if index in self.fail_call_indices:
            raise BackendFailure(f"injected failure on call {index}", backend_id=self.id)
