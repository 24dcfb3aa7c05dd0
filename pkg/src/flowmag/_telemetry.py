"""
OpenTelemetry helpers for flowmag.

Library code opens spans through `run_span` and the `traced` decorator; both
stamp the universal attributes (run.correlation_id, step.id, span.type).
Exporters are only configured by the CLI via `configure_tracing`.
"""

# Copyright 2025 Flowmag Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

import functools
from contextlib import contextmanager
from typing import Any, Callable, Iterator, Optional, TypeVar, Union

from opentelemetry import trace
from opentelemetry.trace import Status, StatusCode

from ._ids import ensure_correlation_id, new_step_id

F = TypeVar("F", bound=Callable[..., Any])

AttributeValue = Union[str, bool, int, float]

TRACER_NAME = "flowmag"


def _tracer() -> trace.Tracer:
    # Looked up per call so providers installed after import are honored.
    return trace.get_tracer(TRACER_NAME)


@contextmanager
def run_span(name: str, span_type: str, **attributes: Optional[AttributeValue]) -> Iterator[trace.Span]:
    """
    Open a span with the universal flowmag attributes.

    Args:
        name: Span name, e.g. "train.epoch"
        span_type: One of "cli", "data", "train", "epoch", "eval", "infer"
        **attributes: Extra attributes; dots may be written as double
            underscores (train__epoch -> train.epoch). None values are skipped.

    Yields:
        The active span. Exceptions are recorded and re-raised.
    """
    with _tracer().start_as_current_span(name) as span:
        span.set_attribute("run.correlation_id", ensure_correlation_id())
        span.set_attribute("step.id", new_step_id())
        span.set_attribute("span.type", span_type)
        for key, value in attributes.items():
            if value is not None:
                span.set_attribute(key.replace("__", "."), value)
        try:
            yield span
        except Exception as e:
            span.record_exception(e)
            span.set_status(Status(StatusCode.ERROR, str(e)))
            raise
        else:
            span.set_status(Status(StatusCode.OK))


def traced(name: str, span_type: str) -> Callable[[F], F]:
    """
    Decorator wrapping a function call in a `run_span`.

    Example:
        @traced("data.read", "data")
        def read_dataset(path): ...
    """

    def decorator(func: F) -> F:
        @functools.wraps(func)
        def wrapper(*args: Any, **kwargs: Any) -> Any:
            with run_span(name, span_type, code__function=func.__qualname__):
                return func(*args, **kwargs)

        return wrapper  # type: ignore[return-value]

    return decorator


def configure_tracing(console: bool = False, otlp_endpoint: Optional[str] = None) -> bool:
    """
    Install an SDK tracer provider with the requested exporters.

    Returns:
        bool: True if a provider was installed, False when neither exporter
        was requested (spans stay no-ops).
    """
    if not console and not otlp_endpoint:
        return False

    from opentelemetry.sdk.resources import Resource
    from opentelemetry.sdk.trace import TracerProvider
    from opentelemetry.sdk.trace.export import (
        BatchSpanProcessor,
        ConsoleSpanExporter,
        SimpleSpanProcessor,
    )

    provider = TracerProvider(resource=Resource.create({"service.name": "flowmag"}))
    if console:
        provider.add_span_processor(SimpleSpanProcessor(ConsoleSpanExporter()))
    if otlp_endpoint:
        from opentelemetry.exporter.otlp.proto.http.trace_exporter import OTLPSpanExporter

        endpoint = otlp_endpoint.rstrip("/")
        if not endpoint.endswith("/v1/traces"):
            endpoint = f"{endpoint}/v1/traces"
        provider.add_span_processor(BatchSpanProcessor(OTLPSpanExporter(endpoint=endpoint)))
    trace.set_tracer_provider(provider)
    return True


def shutdown_tracing() -> None:
    """Flush and shut down the installed SDK provider, if any."""
    provider = trace.get_tracer_provider()
    shutdown = getattr(provider, "shutdown", None)
    if callable(shutdown):
        shutdown()
