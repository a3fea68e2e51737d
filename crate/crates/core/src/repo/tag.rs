use super::RepoRef;

const IMAGE_NAMESPACE: &str = "everhub";
const PART_MAX: usize = 30;
const TAG_MAX: usize = 128;

/// Image reference for one (user, repository, commit) triple:
/// `everhub/{user}-{name}:{sha12}`.
///
/// `repo.resolved_commit` must be set.
pub fn compute_image_tag(user_login: &str, repo: &RepoRef) -> String {
    let user = sanitize(user_login);
    let name = sanitize(&repo.name);
    let mut component = format!("{user}-{name}");
    // component must start with [a-z0-9]
    if !component.starts_with(|c: char| c.is_ascii_lowercase() || c.is_ascii_digit()) {
        component.insert(0, 'x');
    }
    let sha12: String = repo.resolved_commit.chars().take(12).collect();
    format!("{IMAGE_NAMESPACE}/{component}:{sha12}")
}

fn sanitize(s: &str) -> String {
    s.chars()
        .flat_map(char::to_lowercase)
        .map(|c| match c {
            'a'..='z' | '0'..='9' | '_' | '.' | '-' => c,
            _ => '-',
        })
        .take(PART_MAX)
        .collect()
}

/// Checks the reference grammar the hub relies on: every path component
/// matches `[a-z0-9][a-z0-9_.-]*`, the tag matches `[A-Za-z0-9_][A-Za-z0-9_.-]*`,
/// and the whole reference is at most 128 characters.
pub fn is_valid_image_tag(reference: &str) -> bool {
    if reference.len() > TAG_MAX {
        return false;
    }
    let Some((path, tag)) = reference.rsplit_once(':') else {
        return false;
    };
    let component_ok = |c: &str| {
        let mut bytes = c.bytes();
        matches!(bytes.next(), Some(b'a'..=b'z' | b'0'..=b'9'))
            && bytes.all(|b| matches!(b, b'a'..=b'z' | b'0'..=b'9' | b'_' | b'.' | b'-'))
    };
    let tag_ok = {
        let mut bytes = tag.bytes();
        matches!(bytes.next(), Some(b'a'..=b'z' | b'A'..=b'Z' | b'0'..=b'9' | b'_'))
            && bytes.all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-'))
    };
    tag_ok && path.split('/').all(component_ok)
}
