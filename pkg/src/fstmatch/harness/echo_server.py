"""Test double for the external scoring protocol.

    python -m fstmatch.harness.echo_server --mode popcount
    python -m fstmatch.harness.echo_server --mode sum --tcp 0 --shuffle

``popcount`` scores a mask by its number of kept grids; ``sum`` by the sum
of the kept grids' features (an additive game).  ``--shuffle`` answers each
burst of requests in reverse order, ``--die-after N`` exits after N score
requests and ``--garble-after N`` answers the N+1-th request with junk.
"""

from __future__ import annotations

import argparse
import json
import os
import select
import socket
import sys


def _answer(msg: dict, images: dict, mode: str) -> dict:
    rid = msg.get("id")
    if msg.get("op") == "register":
        images[msg["image_id"]] = msg["grids"]
        return {"id": rid, "ok": True}
    if msg.get("op") != "score":
        return {"id": rid, "error": f"unknown op {msg.get('op')!r}"}
    grids = images.get(msg["image_id"])
    if grids is None:
        return {"id": rid, "error": f"image {msg['image_id']!r} not registered"}
    mask = msg["mask"]
    if mode == "popcount":
        return {"id": rid, "score": float(sum(mask))}
    return {"id": rid, "score": float(sum(sum(g) for g, m in zip(grids, mask) if m))}


def serve(read_fd: int, write, args) -> None:
    images: dict = {}
    buf = b""
    scored = 0
    out: list[dict] = []
    while True:
        chunk = os.read(read_fd, 65536)
        if not chunk:
            return
        buf += chunk
        *lines, buf = buf.split(b"\n")
        for line in lines:
            if not line.strip():
                continue
            msg = json.loads(line)
            if msg.get("op") == "score":
                if args.die_after is not None and scored >= args.die_after:
                    sys.exit(3)
                if args.garble_after is not None and scored >= args.garble_after:
                    write(b"this is not json\n")
                    scored += 1
                    continue
                scored += 1
            out.append(_answer(msg, images, args.mode))
        # flush once the burst of requests has been read
        if not select.select([read_fd], [], [], 0.02)[0]:
            if args.shuffle:
                out.reverse()
            write(b"".join((json.dumps(m) + "\n").encode() for m in out))
            out = []


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--mode", choices=("popcount", "sum"), default="popcount")
    ap.add_argument("--tcp", type=int, metavar="PORT", help="listen on PORT (0 picks one) instead of stdio")
    ap.add_argument("--shuffle", action="store_true")
    ap.add_argument("--die-after", type=int)
    ap.add_argument("--garble-after", type=int)
    args = ap.parse_args(argv)
    if args.tcp is None:
        out_fd = sys.stdout.fileno()
        serve(sys.stdin.fileno(), lambda b: os.write(out_fd, b), args)
        return 0
    srv = socket.create_server(("127.0.0.1", args.tcp))
    print(f"PORT {srv.getsockname()[1]}", flush=True)
    while True:
        conn, _ = srv.accept()
        with conn:
            serve(conn.fileno(), conn.sendall, args)


if __name__ == "__main__":
    sys.exit(main())
