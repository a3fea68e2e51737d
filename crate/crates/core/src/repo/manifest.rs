use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Checkout;

/// Which of the conventional repository components a checkout carries.
///
/// Only the `Dockerfile` is required to launch; the rest is reported so the
/// user can see how complete the repository is.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepoManifest {
    pub has_dockerfile: bool,
    pub has_readme: bool,
    pub notebook_paths: Vec<String>,
    pub workflow_path: Option<String>,
    pub ci_config_path: Option<String>,
    pub launchable: bool,
}

impl RepoManifest {
    /// Human-readable checklist, one component per line.
    pub fn checklist(&self) -> String {
        fn mark(present: bool) -> &'static str {
            if present {
                "[x]"
            } else {
                "[ ]"
            }
        }
        let notebooks = if self.notebook_paths.is_empty() {
            String::from("none")
        } else {
            self.notebook_paths.join(", ")
        };
        let mut out = String::new();
        out.push_str(&format!("{} environment   Dockerfile\n", mark(self.has_dockerfile)));
        out.push_str(&format!("{} assumptions   README\n", mark(self.has_readme)));
        out.push_str(&format!(
            "{} code          notebooks: {notebooks}\n",
            mark(!self.notebook_paths.is_empty())
        ));
        out.push_str(&format!(
            "{} workflow      {}\n",
            mark(self.workflow_path.is_some()),
            self.workflow_path.as_deref().unwrap_or("none")
        ));
        out.push_str(&format!(
            "{} checks        {}\n",
            mark(self.ci_config_path.is_some()),
            self.ci_config_path.as_deref().unwrap_or("none")
        ));
        out.push_str(&format!(
            "launchable: {}\n",
            if self.launchable { "yes" } else { "no (a root Dockerfile is required)" }
        ));
        out
    }
}

pub fn inspect_manifest(checkout: &Checkout) -> RepoManifest {
    inspect_dir(&checkout.root_path)
}

pub(crate) fn inspect_dir(root: &Path) -> RepoManifest {
    let mut root_files: Vec<String> = std::fs::read_dir(root)
        .map(|rd| {
            rd.filter_map(Result::ok)
                .filter(|e| e.path().is_file())
                .filter_map(|e| e.file_name().into_string().ok())
                .collect()
        })
        .unwrap_or_default();
    root_files.sort();

    let has_dockerfile = root_files.iter().any(|f| f == "Dockerfile");
    let has_readme = root_files.iter().any(|f| {
        let lower = f.to_lowercase();
        lower == "readme" || lower.starts_with("readme.")
    });

    let workflow_path = root_files
        .iter()
        .find(|f| *f == "Makefile")
        .or_else(|| root_files.iter().find(|f| f.eq_ignore_ascii_case("snakefile")))
        .or_else(|| root_files.iter().find(|f| f.ends_with(".sh")))
        .cloned();

    let ci_config_path = ["circle.yml", ".travis.yml"]
        .into_iter()
        .find(|c| root_files.iter().any(|f| f == c))
        .map(String::from);

    let mut notebook_paths: Vec<String> = walkdir::WalkDir::new(root)
        .min_depth(1)
        .into_iter()
        .filter_entry(|e| {
            !(e.file_type().is_dir() && (e.file_name() == ".git" || e.file_name() == ".ipynb_checkpoints"))
        })
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .filter(|e| e.path().extension().is_some_and(|x| x == "ipynb"))
        .filter_map(|e| relative_slash_path(root, e.path()))
        .collect();
    notebook_paths.sort();

    RepoManifest {
        has_dockerfile,
        has_readme,
        notebook_paths,
        workflow_path,
        ci_config_path,
        launchable: has_dockerfile,
    }
}

fn relative_slash_path(root: &Path, path: &Path) -> Option<String> {
    let rel = path.strip_prefix(root).ok()?;
    let parts: Option<Vec<&str>> = rel.components().map(|c| c.as_os_str().to_str()).collect();
    let joined = parts?.join("/");
    (!joined.is_empty() && !joined.starts_with('/') && !joined.split('/').any(|s| s == ".."))
        .then_some(joined)
}
