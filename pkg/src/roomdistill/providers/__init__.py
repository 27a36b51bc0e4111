"""
    roomdistill.providers
    ~~~~~~~~~~~~~~~~~~~~~

    Score providers: the prior side of score distillation.

    Providers are selected by name in ``prior.providers``.  A plain name such
    as ``oracle`` resolves to the factory function of the same name in this
    module; a dotted name is imported as a :class:`BaseProvider` subclass or
    factory function.

    :license: BSD, see LICENSE for more details.
"""

import logging

from werkzeug.utils import import_string

from roomdistill.providers.base import BaseProvider
from roomdistill.providers.base import Guidance
from roomdistill.providers.base import NoiseSchedule
from roomdistill.providers.base import ScoreQuery
from roomdistill.providers.base import ScoreResponse
from roomdistill.providers.caa import CaaProvider
from roomdistill.providers.caa import CaaWeights
from roomdistill.providers.composite import CompositeProvider
from roomdistill.providers.oracle import OracleProvider
from roomdistill.providers.oracle import OracleRoom
from roomdistill.providers.oracle import OversaturatedOracleProvider

logger = logging.getLogger(__name__)


def oracle(config, args, kwargs):
    return OracleProvider.factory(config, args, kwargs)


def oracle_oversaturated(config, args, kwargs):
    return OversaturatedOracleProvider.factory(config, args, kwargs)


def caa(config, args, kwargs):
    return CaaProvider.factory(config, args, kwargs)


def resolve_factory(name: str):
    """The factory for a provider name; raises ``ImportError`` if unknown."""
    import_me = name
    if "." not in import_me:
        # Plain names are factory functions in this module; ``oracle`` and
        # ``caa`` share their names with submodules, which ``import_string``
        # would return instead.
        factory = globals().get(import_me)
        if not callable(factory):
            raise ImportError(f"no provider factory named {name!r}")
    else:
        factory = import_string(import_me)
    if isinstance(factory, type) and issubclass(factory, BaseProvider):
        factory = factory.factory
    return factory


def build_provider(name: str, config) -> BaseProvider:
    return resolve_factory(name)(config, [], {})


def build_score_provider(config) -> CompositeProvider:
    """The weighted provider stack and negative variant a config asks for."""
    prior = config.prior
    stack = [(build_provider(name, config), weight) for name, weight in prior.providers]
    negative = None
    if prior.negative:
        negative = build_provider(prior.negative, config)
    logger.debug(
        "providers: %s negative=%s",
        ", ".join(f"{name}x{weight}" for name, weight in prior.providers),
        prior.negative or "none",
    )
    return CompositeProvider(stack, negative)


__all__ = (
    "oracle",
    "oracle_oversaturated",
    "caa",
    "BaseProvider",
    "CaaProvider",
    "CaaWeights",
    "CompositeProvider",
    "Guidance",
    "NoiseSchedule",
    "OracleProvider",
    "OracleRoom",
    "OversaturatedOracleProvider",
    "ScoreQuery",
    "ScoreResponse",
    "build_provider",
    "build_score_provider",
)
