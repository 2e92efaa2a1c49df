//! Deterministic synthetic apps.
//!
//! Each output file holds the sha256 (hex, newline-terminated) of a key made of
//! the app name and version, the slot and file name, `config.json` without its
//! `_task` line, and a sorted listing of `<input path> <sha256>` lines.
//! Statistical-feature outputs hold a tidy `structure/measure/value` table whose
//! values are derived from the same key. The shell hooks and [`run_native`]
//! produce byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::digest::{self, sha256_hex};
use crate::error::{Error, Result};
use crate::persist;
use crate::registry::{write_hook, AppDescriptor, ConfigParam, ConfigType, Slot};

pub const SYNTHETIC_MANIFEST: &str = "synthetic.json";
pub(crate) const DONE_MARKER: &str = ".synthetic_done";
pub(crate) const FAILED_MARKER: &str = ".synthetic_failed";
const LISTING: &str = ".synthetic_inputs";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureOutput {
    pub file: String,
    pub structures: Vec<String>,
    pub measures: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticOutput {
    pub slot: Slot,
    #[serde(default)]
    pub files: Vec<String>,
    #[serde(default)]
    pub features: Option<FeatureOutput>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticApp {
    pub name: String,
    pub version: String,
    pub inputs: Vec<Slot>,
    pub outputs: Vec<SyntheticOutput>,
}

impl SyntheticApp {
    pub fn descriptor(&self, service_dir: &Path) -> AppDescriptor {
        AppDescriptor {
            name: self.name.clone(),
            service_ref: service_dir.display().to_string(),
            version: self.version.clone(),
            input_slots: self.inputs.clone(),
            output_slots: self.outputs.iter().map(|o| o.slot.clone()).collect(),
            config_schema: vec![
                ConfigParam {
                    key: "fail".into(),
                    kind: ConfigType::Boolean,
                    default: Some(false.into()),
                },
                ConfigParam {
                    key: "param".into(),
                    kind: ConfigType::Any,
                    default: Some(0.into()),
                },
            ],
        }
    }

    fn validate(&self) -> Result<()> {
        let words = std::iter::once(self.name.as_str())
            .chain(std::iter::once(self.version.as_str()))
            .chain(self.outputs.iter().flat_map(|o| {
                std::iter::once(o.slot.slot_id.as_str())
                    .chain(o.files.iter().map(String::as_str))
                    .chain(o.features.iter().flat_map(|f| {
                        std::iter::once(f.file.as_str())
                            .chain(f.structures.iter().map(String::as_str))
                            .chain(f.measures.iter().map(String::as_str))
                    }))
            }));
        for w in words {
            let ok = !w.is_empty()
                && !w.starts_with('-')
                && !w.contains("..")
                && w.chars().all(|c| c.is_ascii_alphanumeric() || "._-/".contains(c));
            if !ok {
                return Err(Error::validation(format!("synthetic app: unsafe name {w:?}")));
            }
        }
        Ok(())
    }
}

fn quote(s: &str) -> String {
    format!("'{s}'")
}

fn start_script(app: &SyntheticApp) -> String {
    let mut s = String::new();
    s.push_str("#!/bin/sh\n");
    let _ = writeln!(s, "# synthetic app {} {}", app.name, app.version);
    s.push_str("set -e\n");
    let _ = writeln!(s, "APP={}", quote(&app.name));
    let _ = writeln!(s, "VERSION={}", quote(&app.version));
    s.push_str(
        r#"sha256() {
  if command -v sha256sum >/dev/null 2>&1; then sha256sum | cut -d' ' -f1
  else shasum -a 256 | cut -d' ' -f1; fi
}
key() {
  printf 'app=%s\nversion=%s\n' "$APP" "$VERSION"
  printf '%s\n' "$@"
  grep -v '^  "_task": ' config.json || true
  cat .synthetic_inputs
}
echo "local-$$" > jobid
mkdir -p inputs
: > .synthetic_inputs
find inputs -type f | LC_ALL=C sort | while IFS= read -r f; do
  printf '%s %s\n' "$f" "$(sha256 < "$f")" >> .synthetic_inputs
done
if grep -q '^  "fail": true' config.json; then
  : > .synthetic_failed
  exit 0
fi
"#,
    );
    for out in &app.outputs {
        let slot = &out.slot.slot_id;
        let _ = writeln!(s, "mkdir -p {}", quote(&format!("outputs/{slot}")));
        for file in &out.files {
            if let Some(parent) = Path::new(file).parent().filter(|p| !p.as_os_str().is_empty()) {
                let _ = writeln!(s, "mkdir -p {}", quote(&format!("outputs/{slot}/{}", parent.display())));
            }
            let _ = writeln!(
                s,
                "key {} {} | sha256 > {}",
                quote(&format!("slot={slot}")),
                quote(&format!("file={file}")),
                quote(&format!("outputs/{slot}/{file}"))
            );
        }
        if let Some(f) = &out.features {
            let structures: Vec<String> = f.structures.iter().map(|x| quote(x)).collect();
            let measures: Vec<String> = f.measures.iter().map(|x| quote(x)).collect();
            s.push_str("{\n  printf 'structure\\tmeasure\\tvalue\\n'\n");
            let _ = writeln!(s, "  for s in {}; do", structures.join(" "));
            let _ = writeln!(s, "    for m in {}; do", measures.join(" "));
            let _ = writeln!(
                s,
                "      h=$(key {} \"structure=$s\" \"measure=$m\" | sha256 | cut -c1-8)",
                quote(&format!("slot={slot}"))
            );
            s.push_str("      n=$(( 0x$h % 1000000 ))\n");
            s.push_str("      printf '%s\\t%s\\t%d.%03d\\n' \"$s\" \"$m\" $((n / 1000)) $((n % 1000))\n");
            s.push_str("    done\n  done\n");
            let _ = writeln!(s, "}} > {}", quote(&format!("outputs/{slot}/{}", f.file)));
        }
    }
    s.push_str(": > .synthetic_done\n");
    s
}

const STATUS_SCRIPT: &str = "#!/bin/sh\n\
[ -f .synthetic_failed ] && exit 2\n\
[ -f .synthetic_done ] && exit 1\n\
exit 0\n";

const STOP_SCRIPT: &str = "#!/bin/sh\n: > .synthetic_stopped\nexit 0\n";

/// Writes a complete ABCD service for `app` into `dir`.
pub fn write_service(dir: &Path, app: &SyntheticApp) -> Result<AppDescriptor> {
    app.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    let desc = app.descriptor(dir);
    persist::write_json(&dir.join("app.json"), &desc)?;
    persist::write_json(&dir.join(SYNTHETIC_MANIFEST), app)?;
    write_hook(dir, "start", &start_script(app))?;
    write_hook(dir, "status", STATUS_SCRIPT)?;
    write_hook(dir, "stop", STOP_SCRIPT)?;
    Ok(desc)
}

/// In-process equivalent of the synthetic `start` hook.
pub fn run_native(work_dir: &Path) -> Result<()> {
    let app: SyntheticApp = persist::read_json(&work_dir.join(SYNTHETIC_MANIFEST))?
        .ok_or_else(|| Error::Contract("synthetic manifest missing".into()))?;
    let config_path = work_dir.join("config.json");
    let config = fs::read_to_string(&config_path).map_err(|e| Error::storage(&config_path, e))?;

    let inputs = work_dir.join("inputs");
    fs::create_dir_all(&inputs).map_err(|e| Error::storage(&inputs, e))?;
    let mut listing = String::new();
    for rel in digest::list_files(&inputs)? {
        let path = inputs.join(&rel);
        let bytes = fs::read(&path).map_err(|e| Error::storage(&path, e))?;
        let _ = writeln!(listing, "inputs/{rel} {}", sha256_hex(&bytes));
    }
    persist::write_atomic(&work_dir.join(LISTING), listing.as_bytes())?;

    if config.lines().any(|l| l.starts_with("  \"fail\": true")) {
        persist::write_atomic(&work_dir.join(FAILED_MARKER), b"")?;
        return Ok(());
    }

    let filtered: String = config
        .split_inclusive('\n')
        .filter(|l| !l.starts_with("  \"_task\": "))
        .collect();
    let key = |extra: &[String]| -> String {
        let mut k = format!("app={}\nversion={}\n", app.name, app.version);
        for e in extra {
            k.push_str(e);
            k.push('\n');
        }
        k.push_str(&filtered);
        k.push_str(&listing);
        sha256_hex(k.as_bytes())
    };

    for out in &app.outputs {
        let slot = &out.slot.slot_id;
        let dir = work_dir.join("outputs").join(slot);
        for file in &out.files {
            let h = key(&[format!("slot={slot}"), format!("file={file}")]);
            persist::write_atomic(&dir.join(file), format!("{h}\n").as_bytes())?;
        }
        if let Some(f) = &out.features {
            let mut table = String::from("structure\tmeasure\tvalue\n");
            for s in &f.structures {
                for m in &f.measures {
                    let h = key(&[format!("slot={slot}"), format!("structure={s}"), format!("measure={m}")]);
                    let n = u64::from_str_radix(&h[..8], 16).expect("hex digest") % 1_000_000;
                    let _ = writeln!(table, "{s}\t{m}\t{}.{:03}", n / 1000, n % 1000);
                }
            }
            persist::write_atomic(&dir.join(&f.file), table.as_bytes())?;
        }
    }
    persist::write_atomic(&work_dir.join(DONE_MARKER), b"")
}

#[cfg(all(test, unix))]
mod tests {
    use super::*;
    use crate::exec::run_hook;

    fn app() -> SyntheticApp {
        SyntheticApp {
            name: "feat".into(),
            version: "1.0".into(),
            inputs: vec![Slot::new("in", "sim/blob")],
            outputs: vec![
                SyntheticOutput {
                    slot: Slot::new("out", "sim/blob"),
                    files: vec!["blob.txt".into(), "sub/extra.txt".into()],
                    features: None,
                },
                SyntheticOutput {
                    slot: Slot::new("stats", "sim/stats"),
                    files: vec![],
                    features: Some(FeatureOutput {
                        file: "features.tsv".into(),
                        structures: vec!["lh".into(), "rh".into()],
                        measures: vec!["volume".into(), "thickness".into()],
                    }),
                },
            ],
        }
    }

    fn work_dir(service: &Path, config: &str) -> tempfile::TempDir {
        let wd = tempfile::tempdir().unwrap();
        digest::copy_tree(service, wd.path()).unwrap();
        fs::create_dir_all(wd.path().join("inputs/in")).unwrap();
        fs::write(wd.path().join("inputs/in/a.txt"), b"alpha").unwrap();
        fs::write(wd.path().join("inputs/in/b.txt"), b"beta").unwrap();
        fs::write(wd.path().join("config.json"), config).unwrap();
        wd
    }

    const CONFIG: &str = "{\n  \"_app\": \"a1\",\n  \"_task\": \"t1\",\n  \"param\": 3\n}\n";

    #[test]
    fn shell_and_native_transforms_agree() {
        let svc = tempfile::tempdir().unwrap();
        write_service(svc.path(), &app()).unwrap();
        let shell = work_dir(svc.path(), CONFIG);
        let native = work_dir(svc.path(), CONFIG);
        assert_eq!(run_hook(shell.path(), "start").unwrap(), Some(0));
        run_native(native.path()).unwrap();
        let a = digest::file_tree(&shell.path().join("outputs")).unwrap();
        let b = digest::file_tree(&native.path().join("outputs")).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
        assert_eq!(run_hook(shell.path(), "status").unwrap(), Some(1));
    }

    #[test]
    fn task_id_does_not_change_outputs_but_config_does() {
        let svc = tempfile::tempdir().unwrap();
        write_service(svc.path(), &app()).unwrap();
        let a = work_dir(svc.path(), CONFIG);
        let b = work_dir(svc.path(), &CONFIG.replace("t1", "t2"));
        let c = work_dir(svc.path(), &CONFIG.replace("\"param\": 3", "\"param\": 4"));
        for d in [&a, &b, &c] {
            run_native(d.path()).unwrap();
        }
        let tree = |d: &tempfile::TempDir| digest::file_tree(&d.path().join("outputs")).unwrap();
        assert_eq!(tree(&a), tree(&b));
        assert_ne!(tree(&a)["out/blob.txt"], tree(&c)["out/blob.txt"]);
    }

    #[test]
    fn fail_flag_makes_status_report_failure() {
        let svc = tempfile::tempdir().unwrap();
        write_service(svc.path(), &app()).unwrap();
        let wd = work_dir(svc.path(), "{\n  \"_task\": \"t1\",\n  \"fail\": true\n}\n");
        assert_eq!(run_hook(wd.path(), "start").unwrap(), Some(0));
        assert_eq!(run_hook(wd.path(), "status").unwrap(), Some(2));
    }

    #[test]
    fn feature_table_shape() {
        let svc = tempfile::tempdir().unwrap();
        write_service(svc.path(), &app()).unwrap();
        let wd = work_dir(svc.path(), CONFIG);
        run_native(wd.path()).unwrap();
        let text = fs::read_to_string(wd.path().join("outputs/stats/features.tsv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "structure\tmeasure\tvalue");
        assert_eq!(lines.len(), 1 + 4);
        for l in &lines[1..] {
            let v: f64 = l.split('\t').nth(2).unwrap().parse().unwrap();
            assert!((0.0..1000.0).contains(&v));
        }
    }

    #[test]
    fn unsafe_names_rejected() {
        let mut a = app();
        a.outputs[0].files = vec!["x'; rm -rf /".into()];
        let svc = tempfile::tempdir().unwrap();
        assert!(write_service(svc.path(), &a).is_err());
    }
}
