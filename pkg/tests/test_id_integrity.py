"""
ID integrity tests for flowmag.

Tests to ensure correlation IDs and step IDs are properly maintained across spans.
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

import asyncio

import pytest
from opentelemetry.trace import StatusCode

from flowmag._ids import _correlation_id_var, ensure_correlation_id, get_correlation_id, new_correlation_id, new_step_id
from flowmag._telemetry import run_span, traced
from flowmag.errors import DomainError


def test_correlation_id_consistency():
    """Correlation ID stays the same across repeated lookups."""
    correlation_id = new_correlation_id()
    assert get_correlation_id() == correlation_id
    assert ensure_correlation_id() == correlation_id
    assert get_correlation_id() == correlation_id


def test_spans_share_correlation_but_not_step(span_exporter):
    """Two spans of one run carry the same correlation ID and distinct step IDs."""
    correlation_id = new_correlation_id()
    with run_span("data.read", "data"):
        pass
    with run_span("train.run", "train", train__variant="ne", skipped=None):
        pass

    first, second = span_exporter.get_finished_spans()
    assert first.attributes["run.correlation_id"] == correlation_id
    assert second.attributes["run.correlation_id"] == correlation_id
    assert first.attributes["step.id"] != second.attributes["step.id"]
    assert second.attributes["span.type"] == "train"
    assert second.attributes["train.variant"] == "ne"
    assert "skipped" not in second.attributes


def test_failed_span_records_error(span_exporter):
    """Exceptions inside a span set ERROR status and are re-raised."""
    with pytest.raises(DomainError):
        with run_span("eval.ha", "eval"):
            raise DomainError("eval", "boom")

    (span,) = span_exporter.get_finished_spans()
    assert span.status.status_code == StatusCode.ERROR
    assert span.events[0].name == "exception"


def test_traced_decorator(span_exporter):
    """@traced wraps the call in a named span."""

    @traced("data.synth", "data")
    def generate(n):
        return n * 2

    assert generate(21) == 42
    (span,) = span_exporter.get_finished_spans()
    assert span.name == "data.synth"
    assert span.attributes["code.function"].endswith("generate")
    assert span.status.status_code == StatusCode.OK


def test_context_isolation():
    """Correlation IDs are isolated between different contexts."""

    async def task_with_correlation():
        new_correlation_id()
        return get_correlation_id()

    async def run_tasks():
        results = await asyncio.gather(*(task_with_correlation() for _ in range(3)))
        assert len(set(results)) == 3
        for correlation_id in results:
            assert len(correlation_id) == 36
            assert correlation_id.count("-") == 4

    asyncio.run(run_tasks())


def test_ensure_correlation_id_creates_if_missing():
    """ensure_correlation_id creates a new ID if none exists."""
    _correlation_id_var.set(None)
    assert get_correlation_id() is None

    correlation_id = ensure_correlation_id()
    assert correlation_id is not None
    assert len(correlation_id) == 36
    assert get_correlation_id() == correlation_id


def test_step_id_uniqueness():
    """Step IDs are unique and well-formed."""
    step_ids = [new_step_id() for _ in range(10)]
    assert len(set(step_ids)) == 10
    for step_id in step_ids:
        assert step_id.startswith("stp-")
        assert len(step_id) == 16


if __name__ == "__main__":
    pytest.main([__file__])
