import pytest
import yaml

from floodsens.config import ConfigError, validate_config
from floodsens.fixture import demo_fixture


@pytest.fixture(scope="module")
def site(tmp_path_factory):
    out = tmp_path_factory.mktemp("site")
    demo_fixture().write(out)
    return out


def write_cfg(site, tmp_path, **changes):
    cfg = yaml.safe_load((site / "config.yaml").read_text())
    for dotted, value in changes.items():
        node = cfg
        keys = dotted.split("__")
        for k in keys[:-1]:
            node = node[k]
        if value is KeyError:
            node.pop(keys[-1])
        else:
            node[keys[-1]] = value
    # keep relative paths pointing at the site
    cfg["stack"]["dtm"] = str(site / cfg["stack"]["dtm"])
    cfg["stack"]["layers"] = {k: str(site / v) for k, v in cfg["stack"]["layers"].items()}
    for key in ("hydrograph", "probes"):
        if isinstance(cfg.get(key), str) and not cfg[key].startswith("/"):
            cfg[key] = str(site / cfg[key])
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def diagnostics(path):
    with pytest.raises(ConfigError) as exc:
        validate_config(path)
    return exc.value.diagnostics


def test_demo_config_is_valid(site):
    cfg = validate_config(site / "config.yaml")
    assert cfg.design_size == 4 * 10 * 5
    assert cfg.plan.budget == 200
    assert cfg.dtm == (site / "dtm.asc").resolve()
    assert cfg.store_dir == (site / "store").resolve()
    assert cfg.boundaries.west.kind == "inflow"
    assert cfg.load_hydrograph().discharges[0] == 40.0


def test_budget_over_design(site, tmp_path):
    path = write_cfg(site, tmp_path, noise__n_draws=100, plan__budget=3000)
    d = diagnostics(path)
    assert any(x.startswith("plan.budget:") and "budget exceeds design size" in x for x in d)


def test_missing_probes_names_the_field(site, tmp_path):
    path = write_cfg(site, tmp_path, probes=str(tmp_path / "nope.csv"))
    d = diagnostics(path)
    assert any(x.startswith("probes:") and "not found" in x for x in d)


def test_all_violations_reported(site, tmp_path):
    path = write_cfg(site, tmp_path, plan__budget=5000, noise__sigma=-1.0, solver__cfl=3.0,
                     initial="wet", analysis__method="bilinear", probes=KeyError)
    d = diagnostics(path)
    fields = {x.split(":")[0] for x in d}
    assert {"noise", "solver", "initial", "analysis.method", "probes"} <= fields


def test_unknown_fields_and_levels(site, tmp_path):
    path = write_cfg(site, tmp_path, solver__mannings=0.02, s_levels=[1, 2, 9])
    d = diagnostics(path)
    assert "solver.mannings: unknown field" in d
    assert any(x.startswith("s_levels:") for x in d)


def test_infeasible_stratified_floor(site, tmp_path):
    path = write_cfg(site, tmp_path, plan__min_e_per_sr=11)
    d = diagnostics(path)
    assert any(x.startswith("plan.min_e_per_sr:") for x in d)


def test_probe_outside_terrain(site, tmp_path):
    (tmp_path / "p.csv").write_text("id,x,y,label\n1,0.0,0.0,far\n")
    path = write_cfg(site, tmp_path, probes=str(tmp_path / "p.csv"))
    d = diagnostics(path)
    assert any("outside the terrain extent" in x for x in d)


def test_not_a_mapping(tmp_path):
    (tmp_path / "c.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        validate_config(tmp_path / "c.yaml")


def test_unreadable_file(tmp_path):
    with pytest.raises(OSError):
        validate_config(tmp_path / "absent.yaml")
