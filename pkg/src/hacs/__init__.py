"""History-aware crawl scheduling for academic homepages.

Estimates per-URL update rates from web-archive capture histories and
decides which URLs to recrawl next.
"""

__version__ = "0.1.0"
