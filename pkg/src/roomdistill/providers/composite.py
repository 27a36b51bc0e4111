"""
    roomdistill.providers.composite
    ~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~

    Weighted combination of providers with optional negative guidance.

    :license: BSD, see LICENSE for more details.
"""

import dataclasses
import logging
from typing import Optional
from typing import Sequence
from typing import Tuple

from roomdistill.providers.base import BaseProvider
from roomdistill.providers.base import ScoreQuery
from roomdistill.providers.base import ScoreResponse
from roomdistill.providers.base import zero_response

logger = logging.getLogger(__name__)


def composite_score(
    query: ScoreQuery,
    providers_with_weights: Sequence[Tuple[BaseProvider, float]],
    negative: Optional[BaseProvider] = None,
) -> ScoreResponse:
    """Weighted sum of provider residuals.

    When a ``negative`` provider is given the result is ``pos + scale * (pos
    - neg)`` with ``scale`` taken from the query's guidance; the negative
    provider sees the negative prompt tags in place of the prompt.
    """
    total = zero_response(query).residuals
    for provider, weight in providers_with_weights:
        if weight == 0.0:
            continue
        response = provider.score(query)
        total = [acc + weight * r for acc, r in zip(total, response.residuals)]
    positive = ScoreResponse(total)
    scale = query.guidance.guidance_scale
    if negative is None or scale == 0.0:
        return positive
    negative_query = dataclasses.replace(
        query, prompt_meta=query.guidance.negative_prompt_meta
    )
    residual_neg = negative.score(negative_query).residuals
    return ScoreResponse(
        [
            pos + scale * (pos - neg)
            for pos, neg in zip(positive.residuals, residual_neg)
        ]
    )


class CompositeProvider(BaseProvider):
    """Acts like one provider built from several weighted ones."""

    def __init__(
        self,
        providers_with_weights: Sequence[Tuple[BaseProvider, float]],
        negative: Optional[BaseProvider] = None,
    ) -> None:
        self.providers_with_weights = list(providers_with_weights)
        self.negative = negative

    def score(self, query: ScoreQuery) -> ScoreResponse:
        return composite_score(query, self.providers_with_weights, self.negative)

    def __iter__(self):
        return iter(self.providers_with_weights)
