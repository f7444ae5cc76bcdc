from concurrent.futures import ThreadPoolExecutor


def ordered_map(fn, items, threads: int = 1):
    """Map ``fn`` over ``items`` on a thread pool; results keep input order."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def chunks(n: int, parts: int):
    step = max(1, -(-n // max(parts, 1)))
    return [(s, min(s + step, n)) for s in range(0, n, step)]
