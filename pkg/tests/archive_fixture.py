"""A tiny in-process CDX index and replay server for ingest tests."""
from __future__ import annotations

import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlsplit

from hacs.ingest import sha1_base32


def page(*links: str) -> bytes:
    anchors = "".join(f'<li><a href="{href}">{href}</a></li>' for href in links)
    return f"<html><body><ul>{anchors}</ul></body></html>".encode()


ALICE_BODIES = {
    "home1": page("pubs.html", "http://other.edu/x"),
    "home2": page("pubs.html", "http://other.edu/x", "teaching.html"),
    "home3": page("pubs.html", "teaching.html", "cv.pdf"),
    "pubs": page("paper1.pdf"),
    "mismatch": page("will-not-hash"),
    "pubs2": page("paper1.pdf", "paper2.pdf"),
}
D = {name: sha1_base32(body) for name, body in ALICE_BODIES.items()}
D["bogus"] = "BOGUSDIGESTBOGUSDIGESTBOGUSDIGEST"

A = "http://cs.foo.edu/~alice/"
ALICE_ROWS = [
    f"edu,foo,cs)/~alice 20160101000000 {A} text/html 200 {D['home1']} 900",
    f"edu,foo,cs)/~alice 20160301000000 {A} text/html 200 {D['home2']} 900",
    # exact repeat of the previous row: removed while fetching
    f"edu,foo,cs)/~alice 20160301000000 {A} text/html 200 {D['home2']} 900",
    # same URL and instant, other digest: planted duplicate
    f"edu,foo,cs)/~alice 20160301000000 {A} text/html 200 {D['home1']} 900",
    f"edu,foo,cs)/~alice 20160501000000 {A} text/html 200 {D['home3']} 900",
    f"edu,foo,cs)/~alice 20160601000000 {A} text/html 200 {D['home3']} 900",
    # planted invalid date, out-of-window and depth-3 rows
    f"edu,foo,cs)/~alice 20161399000000 {A} text/html 200 {D['home1']} 900",
    f"edu,foo,cs)/~alice 20140101000000 {A} text/html 200 {D['home1']} 900",
    f"edu,foo,cs)/~alice/a/b/c.html 20160101000000 {A}a/b/c.html text/html 200 {D['pubs']} 10",
    # filtered while fetching: not found, not HTML
    f"edu,foo,cs)/~alice/gone.html 20160101000000 {A}gone.html text/html 404 {D['pubs']} 10",
    f"edu,foo,cs)/~alice/cv.pdf 20160101000000 {A}cv.pdf application/pdf 200 {D['pubs']} 10",
    f"edu,foo,cs)/~alice/pubs.html 20160102000000 {A}pubs.html text/html 200 {D['pubs']} 10",
    # replay returns 404 for this one
    f"edu,foo,cs)/~alice/pubs.html 20160401000000 {A}pubs.html text/html 200 {D['bogus']} 10",
    # replay returns a body that does not hash to the digest
    f"edu,foo,cs)/~alice/pubs.html 20160501000000 {A}pubs.html text/html 200 {D['pubs2']} 10",
]
ALICE_PLANTED = {"invalid-date": 1, "duplicate": 1, "out-of-window": 1, "depth": 1}

CAROL_ROWS = [
    "edu,carol)/~carol 20160101000000 http://carol.edu/~carol?lang=en text/html 200 AAAA 5",
    "edu,carol)/~carol 20160201000000 http://carol.edu/~carol?lang=de text/html 200 BBBB 5",
]

SEEDS = [
    "http://cs.foo.edu/~alice/",
    "http://carol.edu/~carol",
    "http://dave.edu/~dave/",
    "http://foo.edu/people/eve",
]


class ArchiveFixture:
    def __init__(self):
        self.index = {
            "cs.foo.edu/~alice": "\n".join(ALICE_ROWS) + "\n",
            "carol.edu/~carol": "\n".join(CAROL_ROWS) + "\n",
            "dave.edu/~dave": "",
        }
        self.replay: dict[tuple[str, str], bytes] = {}
        by_digest = {d: ALICE_BODIES[name] for name, d in D.items() if name in ALICE_BODIES}
        # the row kept among same-instant duplicates is the first in sorted order
        for row in sorted(ALICE_ROWS, key=lambda r: (r.split()[1], r.split()[2], r.split()[5])):
            _, ts, url, _, _, digest, _ = row.split()
            if digest in by_digest:
                self.replay.setdefault((ts, url), by_digest[digest])
        self.replay[("20160501000000", A + "pubs.html")] = ALICE_BODIES["mismatch"]
        self.requests: list[str] = []
        fixture = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_GET(self):
                fixture.requests.append(self.path)
                parts = urlsplit(self.path)
                if parts.path == "/cdx":
                    key = parse_qs(parts.query).get("url", [""])[0]
                    self._send(200, fixture.index.get(key, "").encode())
                elif parts.path.startswith("/web/"):
                    rest = self.path[len("/web/"):]
                    ts, _, url = rest.partition("id_/")
                    body = fixture.replay.get((ts, url))
                    self._send(404, b"") if body is None else self._send(200, body)
                else:
                    self._send(404, b"")

            def _send(self, code, body):
                self.send_response(code)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        host, port = self.server.server_address
        self.base = f"http://{host}:{port}"
        self.thread = threading.Thread(target=self.server.serve_forever, kwargs={"poll_interval": 0.02}, daemon=True)

    @property
    def endpoint(self):
        return self.base + "/cdx"

    @property
    def replay_base(self):
        return self.base + "/web"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()
