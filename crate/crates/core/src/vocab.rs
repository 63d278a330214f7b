//! Symbolic token vocabulary shared by the prompt renderer and the host.

pub const PAD: u32 = 0;
/// Placeholder occupying one visual-token position.
pub const VIS: u32 = 1;
/// First task-kind token; task kinds are consecutive.
pub const TASK_BASE: u32 = 2;
pub const TASK_KINDS: u32 = 3;
pub const BUCKET_BASE: u32 = TASK_BASE + TASK_KINDS;
pub const BUCKETS: u32 = 8;
pub const CUE: u32 = BUCKET_BASE + BUCKETS;
/// Answer letters A, B, C, D occupy `LETTER_BASE..LETTER_BASE + 4`.
pub const LETTER_BASE: u32 = CUE + 1;
pub const OBJECT_BASE: u32 = LETTER_BASE + 4;

/// Number of answer options of every item.
pub const OPTIONS: usize = 4;

pub fn letter(index: usize) -> u32 {
    LETTER_BASE + index as u32
}

pub fn object_token(object_id: usize) -> u32 {
    OBJECT_BASE + object_id as u32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_contiguous() {
        assert_eq!(CUE, 13);
        assert_eq!((LETTER_BASE, OBJECT_BASE), (14, 18));
        assert_eq!(object_token(15), 33);
    }
}
