"""Reference judge speaking the opdkit wire protocol.

The potential of an observation is ``f / (f + 1)`` where ``f`` is the
integer after the last ``/`` of its first frame reference, so the judge is
monotone in frame index. Useful for protocol round-trips and demos::

    python -m opdkit.mock_judge                     # stdin/stdout
    python -m opdkit.mock_judge --http 8765         # POST /judge
    python -m opdkit.mock_judge --hang-on ID        # never answer request ID
    python -m opdkit.mock_judge --out-of-range      # answer 1.2 everywhere
"""

from __future__ import annotations

import argparse
import json
import sys
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer


def frame_potential(refs) -> float:
    f = int(str(refs[0]).rsplit("/", 1)[-1])
    return f / (f + 1)


def respond(request: dict, out_of_range: bool = False) -> dict:
    rid = request["id"]
    if request.get("mode") == "pairwise":
        before = frame_potential(request["before"])
        after = frame_potential(request["after"])
        return {"id": rid, "direction": 1 if after > before else -1}
    if out_of_range:
        return {"id": rid, "potential": 1.2}
    return {"id": rid, "potential": frame_potential(request["observation"])}


def serve_stdio(hang_on=(), out_of_range=False) -> None:
    def emit(obj):
        sys.stdout.write(json.dumps(obj) + "\n")
        sys.stdout.flush()

    emit({"ready": True})
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        req = json.loads(line)
        if req.get("id") in hang_on:
            continue
        emit(respond(req, out_of_range))


def make_http_server(host: str = "127.0.0.1", port: int = 0, out_of_range: bool = False) -> ThreadingHTTPServer:
    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            if self.path.rstrip("/") != "/judge":
                self.send_error(404)
                return
            try:
                body = json.loads(self.rfile.read(int(self.headers.get("Content-Length", 0))))
                payload = json.dumps(respond(body, out_of_range)).encode()
            except (ValueError, KeyError):
                self.send_error(400)
                return
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def log_message(self, *args):
            pass

    return ThreadingHTTPServer((host, port), Handler)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--http", type=int, metavar="PORT")
    ap.add_argument("--hang-on", action="append", default=[])
    ap.add_argument("--out-of-range", action="store_true")
    args = ap.parse_args(argv)
    if args.http is not None:
        make_http_server(port=args.http, out_of_range=args.out_of_range).serve_forever()
    else:
        serve_stdio(set(args.hang_on), args.out_of_range)


if __name__ == "__main__":
    main()
