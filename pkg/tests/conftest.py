from __future__ import annotations

import pytest

from hybft.tc import Directory, TcMode, TrustedComponent

SYSTEM_KEY = b"k" * 32


@pytest.fixture
def hmac_pair():
    """Two registered HMAC components sharing one system key, plus directory."""
    directory = Directory(TcMode.HMAC)
    a = TrustedComponent(0, mode=TcMode.HMAC, system_key=SYSTEM_KEY)
    b = TrustedComponent(1, mode=TcMode.HMAC, system_key=SYSTEM_KEY)
    directory.register(0, a.epoch)
    directory.register(1, b.epoch)
    return a, b, directory


@pytest.fixture
def sig_pair():
    """Two registered SIG components with public keys in the directory."""
    directory = Directory(TcMode.SIG)
    a = TrustedComponent(0, mode=TcMode.SIG)
    b = TrustedComponent(1, mode=TcMode.SIG)
    directory.register(0, a.epoch, a.public_key())
    directory.register(1, b.epoch, b.public_key())
    return a, b, directory


def make_hmac_tc(rid: int = 0, **kw) -> TrustedComponent:
    kw.setdefault("mode", TcMode.HMAC)
    kw.setdefault("system_key", SYSTEM_KEY)
    return TrustedComponent(rid, **kw)
