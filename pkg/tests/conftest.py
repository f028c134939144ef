import random
import string

import pytest

from gridfabric.model import Address, ADDRESS_KINDS, Message, MsgType


def random_json_value(rng: random.Random, depth: int = 0):
    choices = ["int", "float", "str", "bool", "null"]
    if depth < 2:
        choices += ["list", "dict"]
    kind = rng.choice(choices)
    if kind == "int":
        return rng.randint(-10**9, 10**9)
    if kind == "float":
        return round(rng.uniform(-1e6, 1e6), rng.randint(0, 8))
    if kind == "str":
        alphabet = string.ascii_letters + string.digits + " _-.:/é中"
        return "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 12)))
    if kind == "bool":
        return rng.random() < 0.5
    if kind == "null":
        return None
    if kind == "list":
        return [random_json_value(rng, depth + 1) for _ in range(rng.randint(0, 4))]
    return {
        f"k{rng.randint(0, 99)}": random_json_value(rng, depth + 1)
        for _ in range(rng.randint(0, 4))
    }


def random_address(rng: random.Random) -> Address:
    return Address(rng.choice(ADDRESS_KINDS), rng.randint(1, 10**6))


def random_message(rng: random.Random) -> Message:
    msg_type = rng.choice(list(MsgType))
    if msg_type is MsgType.CONTROL:
        payload = {
            "nid": f"NID{rng.randint(1, 999)}",
            "setting": {"name": rng.choice(["power", "setpoint_c"]),
                        "value": rng.choice(["on", "off", rng.randint(16, 30)])},
        }
    else:
        payload = {f"f{j}": random_json_value(rng) for j in range(rng.randint(0, 5))}
    n_hops = rng.randint(0, 5)
    times = sorted(rng.randint(0, 10**7) for _ in range(n_hops))
    hops = tuple((rng.choice(["client_send", "cloud_recv", "broker_in", "broker_out",
                              "gw_recv", "link_done"]), t) for t in times)
    return Message(
        msg_type=msg_type,
        sender=random_address(rng),
        target=random_address(rng),
        correlation_id=f"{rng.choice(ADDRESS_KINDS)}{rng.randint(1, 99)}-{rng.randint(1, 10**6)}",
        payload=payload,
        hop_timestamps=hops,
    )


@pytest.fixture
def rng():
    return random.Random(20240817)
