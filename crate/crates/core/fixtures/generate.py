#!/usr/bin/env python3
"""Regenerates the fixture corpus and question files.

The expected answers are computed here, directly from the raw timeline
values, without going through SQL. The Rust end-to-end tests then check
that the SQL route lands on the same answers.

    python3 crates/core/fixtures/generate.py
"""

import datetime as dt
import json
import os
import re

HERE = os.path.dirname(os.path.abspath(__file__))
NULLS = {"n/a", "na", "--", "-", "vacant", "&ndash;", "–", ""}


def spans(pairs, years):
    """[(name, first_year, last_year)] -> {year: name}"""
    out = {}
    for name, a, b in pairs:
        for y in range(a, b + 1):
            out[y] = name
    return {y: out.get(y) for y in years}


def countries():
    years = list(range(2014, 2024))
    ents = []
    ar_pres = spans([("Mira Halvorsen", 2014, 2016), ("Tomas Ekdahl", 2017, 2020),
                     ("Ines Varga", 2021, 2023)], years)
    ar_pm = spans([("Jonas Brandt", 2014, 2015), ("Lena Ostrova", 2016, 2018),
                   ("vacant", 2019, 2019), ("Pavel Durand", 2020, 2023)], years)
    ar_gdp = [412000, 430500, 451200, 447900, 468300, 489000, 455100, 470250, 501800, 498700]
    ar_hdi = ["0.861", "0.864", "0.869", "0.871", "0.874", "0.879", "0.875", "0.879", "0.866", "0.870"]
    ar_pop = [5102000, 5120400, 5141800, 5160200, 5181000, 5199500, 5210100, 5222800, 5230400, 5241900]
    ar_gini = ["31.2", "31.0", "n/a", "30.7", "30.9", "--", "31.4", "31.1", "30.8", "30.6"]
    snaps = []
    for i, y in enumerate(years):
        snaps.append({
            "timestamp": f"{y}-01-01",
            "fields": {
                "gdp_nominal": f"{ar_gdp[i]:,}",
                "hdi": ar_hdi[i],
                "population": f"{ar_pop[i]:,}",
                "gini": ar_gini[i],
                "president": ar_pres[y],
                "prime_minister": ar_pm[y],
            },
        })
    ents.append(("arendia", "Arendia", snaps))

    bo_pres = spans([("Karel Novak", 2014, 2017), ("Sofia Reyes", 2018, 2021),
                     ("Daniel O'Brien", 2022, 2023)], years)
    bo_pm = spans([("Ana Lindqvist", 2014, 2016), ("Marco Bellini", 2017, 2019),
                   ("Ruth Adeyemi", 2020, 2023)], years)
    bo_gdp = [98100, 101250, 99800, 104600, 110020, 108700, 97300, 103900, 112450, 115800]
    bo_hdi = ["0.702", "0.708", "0.711", "0.715", "0.722", "0.719", "0.713", "0.720", "0.726", "0.731"]
    bo_pop = [2204000, 2211500, 2219800, 2230100, 2238700, 2245200, 2251900, 2260300, 2268800, 2275100]
    bo_gini = ["40.1", "39.8", "39.5", "n/a", "38.9", "38.7", "39.0", "&ndash;", "38.2", "38.0"]
    snaps = []
    for i, y in enumerate(reversed(years)):
        # stored newest-first on purpose; the parser sorts
        j = len(years) - 1 - i
        yy = years[j]
        snaps.append({
            "timestamp": f"{yy}-07-01",
            "fields": {
                "gdp_nominal": f"{bo_gdp[j]:,}",
                "hdi": bo_hdi[j],
                "population": f" {bo_pop[j]:,} ",
                "gini": bo_gini[j],
                "president": bo_pres[yy],
                "prime_minister": bo_pm[yy],
            },
        })
    ents.append(("borduria", "Borduria", snaps))
    return ents


def cricket():
    years = list(range(2013, 2023))
    ents = []
    go_cap = spans([("Aragorn Elessar", 2013, 2015), ("Faramir Hurin", 2016, 2019),
                    ("Beregond Tal", 2020, 2022)], years)
    go_coach = spans([("Denethor Ecthel", 2013, 2016), ("&ndash;", 2017, 2017),
                      ("Imrahil Dol", 2018, 2022)], years)
    go_t20 = spans([("Faramir Hurin", 2013, 2015), ("Beregond Tal", 2016, 2018),
                    ("Hirgon Ost", 2019, 2022)], years)
    go_tests = [301, 309, 318, 326, 333, 341, 349, 352, 360, 369]
    go_rec = ["110/95", "113/99", "118/102", "121/106", "125/109", "129/113", "132/117",
              "134/118", "138/122", "142/127"]
    go_odi = ["12", "9", "14", "11", "–", "15", "13", "8", "14", "10"]
    snaps = []
    for i, y in enumerate(years):
        snaps.append({
            "timestamp": f"{y}-03-01",
            "fields": {
                "captain": go_cap[y],
                "coach": go_coach[y],
                "t20i_captain": go_t20[y],
                "num_tests": str(go_tests[i]),
                "test_wins/test_losses": go_rec[i],
                "odi_wins_this_year": go_odi[i],
            },
        })
    ents.append(("gondor", "Gondor national cricket team", snaps))

    ro_cap = spans([("Eomer Eadig", 2013, 2016), ("Elfhelm Marsh", 2017, 2018),
                    ("Erkenbrand West", 2019, 2022)], years)
    ro_coach = spans([("Theoden King", 2013, 2018), ("Gamling Hold", 2019, 2022)], years)
    ro_t20 = spans([("Elfhelm Marsh", 2013, 2016), ("Grimbold Ford", 2017, 2020),
                    ("Eowyn Shield", 2021, 2022)], years)
    ro_tests = [88, 93, 97, 104, 109, 113, 118, 121, 127, 130]
    ro_rec = ["20/51", "22/54", "23/57", "26/60", "28/63", "29/67", "31/&ndash;", "33/71",
              "35/74", "36/76"]
    ro_odi = ["6", "8", "7", "9", "11", "10", "7", "n/a", "12", "9"]
    snaps = []
    for i, y in enumerate(years):
        snaps.append({
            "timestamp": f"{y}-09-15",
            "fields": {
                "captain": ro_cap[y],
                "coach": ro_coach[y],
                "t20i_captain": ro_t20[y],
                "num_tests": str(ro_tests[i]),
                "test_wins/test_losses": ro_rec[i],
                "odi_wins_this_year": ro_odi[i],
            },
        })
    ents.append(("rohan", "Rohan national cricket team", snaps))
    return ents


def agencies():
    years = list(range(2015, 2025))
    ents = []
    mt_min = spans([("Helga Strand", 2015, 2017), ("Oskar Mele", 2018, 2021),
                    ("Yara Quell", 2022, 2024)], years)
    mt_dep = spans([("Oskar Mele", 2015, 2017), ("Yara Quell", 2018, 2021),
                    ("Bram Tolle", 2022, 2024)], years)
    mt_chief = spans([("Ivo Renn", 2015, 2019), ("Ada Myr", 2020, 2024)], years)
    mt_emp = ["1,200", "1,240", "1,310", "~1,300", "1,355", "1,410", "1,398", "1,450", "1,502", "1,530"]
    mt_budget = ["45.5", "47.25", "49.0", "50.75", "52.1", "61.4", "58.9", "57.3", "59.8", "61.4"]
    snaps = []
    for i, y in enumerate(years):
        snaps.append({
            "timestamp": f"{y}-05-10",
            "fields": {
                "minister": mt_min[y],
                "deputy_minister": mt_dep[y],
                "chief_executive": mt_chief[y],
                "employees": mt_emp[i],
                "budget": {"amount": mt_budget[i], "year": str(y)},
                "formed": "12 March 1990",
            },
        })
    ents.append(("ministry_of_tides", "Ministry of Tides", snaps))

    bl_min = spans([("Corin Vale", 2015, 2016), ("Nell Harrow", 2017, 2020),
                    ("Corin Vale", 2021, 2024)], years)
    bl_dep = spans([("Nell Harrow", 2015, 2016), ("Tamsin Reed", 2017, 2020),
                    ("n/a", 2021, 2021), ("Piet Lowe", 2022, 2024)], years)
    bl_chief = spans([("Sela Wren", 2015, 2018), ("Odo Fenn", 2019, 2024)], years)
    bl_emp = ["640", "655", "671", "690", "702", "715", "731", "744", "760", "772"]
    bl_budget = ["18.2", "18.9", "19.4", "20.1", "21.7", "22.3", "22.0", "23.5", "24.2", "23.9"]
    snaps = []
    for i, y in enumerate(years):
        snaps.append({
            "timestamp": f"{y}-11-20",
            "fields": {
                "minister": bl_min[y],
                "deputy_minister": bl_dep[y],
                "chief_executive": bl_chief[y],
                "employees": bl_emp[i],
                "budget": {"amount": bl_budget[i], "year": str(y)},
                "formed": "Mar 3, 2001",
            },
        })
    ents.append(("bureau_of_lanterns", "Bureau of Lanterns", snaps))
    return ents


# ---- independent oracle over raw values ----

def is_null(v):
    return v is None or (isinstance(v, str) and v.strip().lower() in NULLS)


def num(v):
    if is_null(v):
        return None
    s = re.sub(r"[,\s]", "", v)
    try:
        return float(s)
    except ValueError:
        return None


def role_title(field):
    return field.replace("_", " ")


def facts(ents):
    """rows of (entity_name, date, role_title, holder)"""
    rows = []
    for _, name, snaps in ents:
        for s in snaps:
            d = dt.date.fromisoformat(s["timestamp"])
            for k, v in s["fields"].items():
                if isinstance(v, str) and not is_null(v) and num(v) is None and not re.search(r"\d", v):
                    rows.append((name, d, role_title(k), v))
    return rows


def before(rows, role, holder):
    mine = [r for r in rows if r[2] == role and r[3] == holder]
    ent = mine[0][0]
    start = min(r[1] for r in mine)
    prior = sorted([r for r in rows if r[0] == ent and r[2] == role and r[1] < start], key=lambda r: r[1])
    return prior[-1][3] if prior else None


def concurrent(rows, role, holder, holder_role):
    when = {(r[0], r[1]) for r in rows if r[2] == holder_role and r[3] == holder}
    firsts = {}
    for r in rows:
        if r[2] == role and (r[0], r[1]) in when:
            firsts[r[3]] = min(firsts.get(r[3], r[1]), r[1])
    return ", ".join(h for h, _ in sorted(firsts.items(), key=lambda kv: (kv[1], kv[0])))


def aggregation(rows, role, ent, a, b):
    return str(len({r[3] for r in rows if r[0] == ent and r[2] == role and a <= r[1].year <= b}))


def tenure(rows, holder, role, ent):
    ds = [r[1] for r in rows if r[0] == ent and r[2] == role and r[3] == holder]
    return str((max(ds) - min(ds)).days)


def extrema(ents, ent, field):
    for _, name, snaps in ents:
        if name != ent:
            continue
        vals = []
        for s in snaps:
            v = s["fields"][field]
            x = num(v)
            if x is not None:
                vals.append((s["timestamp"][:4], x))
        top = max(x for _, x in vals)
        return ", ".join(sorted({y for y, x in vals if x == top}))


TEMPLATES = {
    "before_after": "Who was {X} before {Y}?",
    "concurrent_role": "Who was {X} when {Y} was {Z}?",
    "temporal_aggregation": "How many different people served as {X} of {E} between {A} and {B}?",
    "tenure_duration": "How many days did {Y} serve as {X} of {E}?",
    "temporal_extrema": "In which year was the {F} of {E} the highest?",
}


def q(ents, rows, pattern, **b):
    if pattern == "before_after":
        ans = before(rows, b["X"], b["Y"])
    elif pattern == "concurrent_role":
        ans = concurrent(rows, b["X"], b["Y"], b["Z"])
    elif pattern == "temporal_aggregation":
        ans = aggregation(rows, b["X"], b["E"], int(b["A"]), int(b["B"]))
    elif pattern == "tenure_duration":
        ans = tenure(rows, b["Y"], b["X"], b["E"])
    else:
        ans = extrema(ents, b["E"], b["F"])
    assert ans, (pattern, b)
    return {"question": TEMPLATES[pattern].format(**b), "expected": ans, "pattern": pattern, "bindings": b}


QUESTIONS = {
    "countries": {
        "gold": [
            ("before_after", dict(X="president", Y="Tomas Ekdahl")),
            ("before_after", dict(X="prime minister", Y="Ruth Adeyemi")),
            ("concurrent_role", dict(X="prime minister", Y="Mira Halvorsen", Z="president")),
            ("concurrent_role", dict(X="president", Y="Marco Bellini", Z="prime minister")),
            ("temporal_aggregation", dict(X="president", E="Arendia", A="2014", B="2018")),
            ("temporal_aggregation", dict(X="prime minister", E="Borduria", A="2016", B="2021")),
            ("tenure_duration", dict(Y="Tomas Ekdahl", X="president", E="Arendia")),
            ("tenure_duration", dict(Y="Ana Lindqvist", X="prime minister", E="Borduria")),
            ("temporal_extrema", dict(F="gdp_nominal", E="Arendia")),
            ("temporal_extrema", dict(F="population", E="Borduria")),
        ],
        "test": [
            ("before_after", dict(X="president", Y="Ines Varga")),
            ("before_after", dict(X="president", Y="Daniel O'Brien")),
            ("before_after", dict(X="prime minister", Y="Pavel Durand")),
            ("concurrent_role", dict(X="president", Y="Pavel Durand", Z="prime minister")),
            ("concurrent_role", dict(X="prime minister", Y="Sofia Reyes", Z="president")),
            ("temporal_aggregation", dict(X="prime minister", E="Arendia", A="2014", B="2023")),
            ("temporal_aggregation", dict(X="president", E="Borduria", A="2019", B="2023")),
            ("tenure_duration", dict(Y="Lena Ostrova", X="prime minister", E="Arendia")),
            ("tenure_duration", dict(Y="Daniel O'Brien", X="president", E="Borduria")),
            ("temporal_extrema", dict(F="hdi", E="Arendia")),
            ("temporal_extrema", dict(F="gdp_nominal", E="Borduria")),
            ("temporal_extrema", dict(F="gini", E="Arendia")),
        ],
    },
    "cricket_team": {
        "gold": [
            ("before_after", dict(X="captain", Y="Faramir Hurin")),
            ("before_after", dict(X="coach", Y="Gamling Hold")),
            ("concurrent_role", dict(X="coach", Y="Beregond Tal", Z="t20i captain")),
            ("concurrent_role", dict(X="captain", Y="Grimbold Ford", Z="t20i captain")),
            ("temporal_aggregation", dict(X="captain", E="Gondor national cricket team", A="2013", B="2020")),
            ("temporal_aggregation", dict(X="t20i captain", E="Rohan national cricket team", A="2015", B="2022")),
            ("tenure_duration", dict(Y="Aragorn Elessar", X="captain", E="Gondor national cricket team")),
            ("tenure_duration", dict(Y="Theoden King", X="coach", E="Rohan national cricket team")),
            ("temporal_extrema", dict(F="num_tests", E="Gondor national cricket team")),
            ("temporal_extrema", dict(F="test_wins", E="Rohan national cricket team")),
        ],
        "test": [
            ("before_after", dict(X="captain", Y="Beregond Tal")),
            ("before_after", dict(X="captain", Y="Erkenbrand West")),
            ("before_after", dict(X="t20i captain", Y="Hirgon Ost")),
            ("concurrent_role", dict(X="captain", Y="Imrahil Dol", Z="coach")),
            ("concurrent_role", dict(X="t20i captain", Y="Theoden King", Z="coach")),
            ("temporal_aggregation", dict(X="coach", E="Gondor national cricket team", A="2013", B="2022")),
            ("temporal_aggregation", dict(X="captain", E="Rohan national cricket team", A="2016", B="2019")),
            ("tenure_duration", dict(Y="Faramir Hurin", X="captain", E="Gondor national cricket team")),
            ("tenure_duration", dict(Y="Grimbold Ford", X="t20i captain", E="Rohan national cricket team")),
            ("temporal_extrema", dict(F="odi_wins_this_year", E="Gondor national cricket team")),
            ("temporal_extrema", dict(F="odi_wins_this_year", E="Rohan national cricket team")),
            ("temporal_extrema", dict(F="test_losses", E="Gondor national cricket team")),
        ],
    },
    "gov_agencies": {
        "gold": [
            ("before_after", dict(X="minister", Y="Oskar Mele")),
            ("before_after", dict(X="chief executive", Y="Odo Fenn")),
            ("concurrent_role", dict(X="deputy minister", Y="Helga Strand", Z="minister")),
            ("concurrent_role", dict(X="chief executive", Y="Tamsin Reed", Z="deputy minister")),
            ("temporal_aggregation", dict(X="minister", E="Ministry of Tides", A="2015", B="2020")),
            ("temporal_aggregation", dict(X="deputy minister", E="Bureau of Lanterns", A="2015", B="2024")),
            ("tenure_duration", dict(Y="Ivo Renn", X="chief executive", E="Ministry of Tides")),
            ("tenure_duration", dict(Y="Sela Wren", X="chief executive", E="Bureau of Lanterns")),
            ("temporal_extrema", dict(F="employees", E="Ministry of Tides")),
            ("temporal_extrema", dict(F="employees", E="Bureau of Lanterns")),
        ],
        "test": [
            ("before_after", dict(X="minister", Y="Yara Quell")),
            ("before_after", dict(X="deputy minister", Y="Piet Lowe")),
            ("before_after", dict(X="minister", Y="Nell Harrow")),
            ("concurrent_role", dict(X="minister", Y="Ada Myr", Z="chief executive")),
            ("concurrent_role", dict(X="deputy minister", Y="Odo Fenn", Z="chief executive")),
            ("temporal_aggregation", dict(X="chief executive", E="Ministry of Tides", A="2015", B="2024")),
            ("temporal_aggregation", dict(X="minister", E="Bureau of Lanterns", A="2015", B="2024")),
            ("tenure_duration", dict(Y="Oskar Mele", X="minister", E="Ministry of Tides")),
            ("tenure_duration", dict(Y="Corin Vale", X="minister", E="Bureau of Lanterns")),
            ("temporal_extrema", dict(F="budget_amount", E="Ministry of Tides")),
            ("temporal_extrema", dict(F="budget_amount", E="Bureau of Lanterns")),
            ("temporal_extrema", dict(F="budget_year", E="Bureau of Lanterns")),
        ],
    },
}


def flat_numeric(ents):
    """Expose composite and nested numeric fields under their column names."""
    out = []
    for slug, name, snaps in ents:
        ns = []
        for s in snaps:
            f = {}
            for k, v in s["fields"].items():
                if isinstance(v, dict):
                    for kk, vv in v.items():
                        f[f"{k}_{kk}"] = vv
                elif "/" in k:
                    for kk, vv in zip(k.split("/"), v.split("/")):
                        f[kk] = vv
                else:
                    f[k] = v
            ns.append({"timestamp": s["timestamp"], "fields": f})
        out.append((slug, name, ns))
    return out


def main():
    domains = {"countries": countries(), "cricket_team": cricket(), "gov_agencies": agencies()}
    for dom, ents in domains.items():
        d = os.path.join(HERE, "corpus", dom)
        os.makedirs(d, exist_ok=True)
        for slug, name, snaps in ents:
            with open(os.path.join(d, f"{slug}.json"), "w") as fh:
                json.dump({"entity": name, "domain": dom, "snapshots": snaps}, fh, indent=2, ensure_ascii=False)
                fh.write("\n")
        rows = facts(ents)
        flat = flat_numeric(ents)
        qd = os.path.join(HERE, "questions")
        os.makedirs(qd, exist_ok=True)
        for split, items in QUESTIONS[dom].items():
            with open(os.path.join(qd, f"{dom}.{split}.jsonl"), "w") as fh:
                for pattern, b in items:
                    fh.write(json.dumps(q(flat, rows, pattern, **b), ensure_ascii=False) + "\n")


if __name__ == "__main__":
    main()
