"""Independent reference for greedy cycle breaking.

Recomputes the priority order from scratch and decides each edge with a
networkx path query instead of maintained reachability sets.
"""

import networkx as nx


def brute_force_greedy(edges):
    deg = {}
    for e in edges:
        for n in (e.from_event, e.to_event):
            deg[n] = deg.get(n, 0) + 1
    ranked = sorted(
        enumerate(edges),
        key=lambda p: (-int(p[1].strength), deg[p[1].from_event] + deg[p[1].to_event], p[1].order, p[0]),
    )
    g = nx.DiGraph()
    g.add_nodes_from(deg)
    kept = set()
    for i, e in ranked:
        if e.from_event == e.to_event or nx.has_path(g, e.to_event, e.from_event):
            continue
        g.add_edge(e.from_event, e.to_event)
        kept.add(i)
    return [edges[i] for i in sorted(kept)]
