/// Normalizes collected text.
///
/// Control bytes other than ASCII whitespace are dropped, each whitespace run
/// becomes one `\n` if it contained a newline and one space otherwise, and
/// the ends are trimmed. Applying it twice changes nothing.
pub fn clean_text(raw: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(raw.len());
    let mut pending: Option<u8> = None;
    for &b in raw {
        if b.is_ascii_whitespace() {
            pending = match (pending, b) {
                (Some(b'\n'), _) | (_, b'\n') => Some(b'\n'),
                _ => Some(b' '),
            };
        } else if b.is_ascii_control() {
            continue;
        } else {
            if let Some(sep) = pending.take() {
                if !out.is_empty() {
                    out.push(sep);
                }
            }
            out.push(b);
        }
    }
    out
}
