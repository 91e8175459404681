"""
Langfuse client for training runs and per-image attacks, or a stand-in that drops every call
when the package is missing or no credentials are configured.
"""

import logging

from config import settings

logger = logging.getLogger(__name__)

try:
    from langfuse import Langfuse
except ImportError:
    Langfuse = None


class NoOpSpan:
    """Accepts the span calls the CLI makes and ignores them."""
    def update(self, *args, **kwargs) -> 'NoOpSpan':
        return self

    def score(self, *args, **kwargs) -> 'NoOpSpan':
        return self

    def end(self, *args, **kwargs) -> 'NoOpSpan':
        return self


class NoOpLangfuse:
    def start_span(self, *args, **kwargs) -> NoOpSpan:
        return NoOpSpan()

    def flush(self, *args, **kwargs) -> None:
        pass


def _create_client():
    if Langfuse is None or not (settings.langfuse_public_key and settings.langfuse_secret_key):
        # Silent fallback: most training and attack runs are not instrumented.
        return NoOpLangfuse()
    try:
        return Langfuse(
            public_key=settings.langfuse_public_key,
            secret_key=settings.langfuse_secret_key,
            base_url=settings.langfuse_base_url or None,
        )
    except Exception as e:
        logger.warning("Failed to initialize Langfuse: %s", e)
        return NoOpLangfuse()


langfuse = _create_client()


def score_outcome(span, **values: float) -> None:
    """Attach numeric scores to a span; booleans are sent as BOOLEAN scores."""
    for name, value in values.items():
        if isinstance(value, bool):
            span.score(name=name, value=1 if value else 0, data_type="BOOLEAN")
        else:
            span.score(name=name, value=float(value), data_type="NUMERIC")
