"""Bob Jenkins' lookup3 ``hashlittle``, byte-at-a-time variant.

Reads the key as little-endian 32-bit words, so results match the C
reference on little-endian hosts regardless of key alignment.
"""

from __future__ import annotations

_M = 0xFFFFFFFF


def _rot(x: int, k: int) -> int:
    return ((x << k) | (x >> (32 - k))) & _M


def _mix(a: int, b: int, c: int) -> tuple[int, int, int]:
    a = (a - c) & _M; a ^= _rot(c, 4); c = (c + b) & _M
    b = (b - a) & _M; b ^= _rot(a, 6); a = (a + c) & _M
    c = (c - b) & _M; c ^= _rot(b, 8); b = (b + a) & _M
    a = (a - c) & _M; a ^= _rot(c, 16); c = (c + b) & _M
    b = (b - a) & _M; b ^= _rot(a, 19); a = (a + c) & _M
    c = (c - b) & _M; c ^= _rot(b, 4); b = (b + a) & _M
    return a, b, c


def _final(a: int, b: int, c: int) -> tuple[int, int, int]:
    c ^= b; c = (c - _rot(b, 14)) & _M
    a ^= c; a = (a - _rot(c, 11)) & _M
    b ^= a; b = (b - _rot(a, 25)) & _M
    c ^= b; c = (c - _rot(b, 16)) & _M
    a ^= c; a = (a - _rot(c, 4)) & _M
    b ^= a; b = (b - _rot(a, 14)) & _M
    c ^= b; c = (c - _rot(b, 24)) & _M
    return a, b, c


def hashlittle(key: bytes, initval: int = 0) -> int:
    """Return the 32-bit lookup3 hash of ``key``."""
    length = len(key)
    a = b = c = (0xDEADBEEF + length + initval) & _M
    pos = 0
    while length > 12:
        a = (a + int.from_bytes(key[pos:pos + 4], "little")) & _M
        b = (b + int.from_bytes(key[pos + 4:pos + 8], "little")) & _M
        c = (c + int.from_bytes(key[pos + 8:pos + 12], "little")) & _M
        a, b, c = _mix(a, b, c)
        length -= 12
        pos += 12
    if length == 0:
        # zero-length tail skips the final mix
        return c
    tail = key[pos:] + bytes(12 - length)
    a = (a + int.from_bytes(tail[0:4], "little")) & _M
    b = (b + int.from_bytes(tail[4:8], "little")) & _M
    c = (c + int.from_bytes(tail[8:12], "little")) & _M
    a, b, c = _final(a, b, c)
    return c


def pid_vpn_key(pid: int, vpn: int) -> bytes:
    """Serialize a (pid, vpn) pair as the 12-byte hash input."""
    return pid.to_bytes(4, "little") + vpn.to_bytes(8, "little")
