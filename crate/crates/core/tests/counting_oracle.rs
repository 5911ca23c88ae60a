//! The string-counting DP against brute force: enumerate every string over
//! the skeleton's alphabet and recognise it with a direct interval parser.

use std::collections::HashMap;

use einspace::grammar::{count_architecture_strings, GrammarSkeleton};
use num_bigint::BigUint;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
enum Tok {
    Open(usize, u32),
    Close(usize, u32),
    Comp(u32),
}

fn alphabet(s: &GrammarSkeleton) -> Vec<Tok> {
    let mut a = Vec::new();
    for (t, &(o, c)) in s.brackets.iter().enumerate() {
        a.extend((0..o).map(|i| Tok::Open(t, i)));
        a.extend((0..c).map(|i| Tok::Close(t, i)));
    }
    a.extend((0..s.computations).map(Tok::Comp));
    a
}

/// CYK-style recogniser for S -> M M | [_t M ]_t and M -> M M | [_t M ]_t | c (| ε).
struct Recogniser<'a> {
    w: &'a [Tok],
    nullable: bool,
    memo: HashMap<(usize, usize), bool>,
}

impl Recogniser<'_> {
    fn bracketed(&mut self, i: usize, j: usize) -> bool {
        j >= i + 2
            && matches!((self.w[i], self.w[j - 1]), (Tok::Open(a, _), Tok::Close(b, _)) if a == b)
            && self.m(i + 1, j - 1)
    }

    fn m(&mut self, i: usize, j: usize) -> bool {
        if i == j {
            return self.nullable;
        }
        if let Some(&r) = self.memo.get(&(i, j)) {
            return r;
        }
        let r = (j == i + 1 && matches!(self.w[i], Tok::Comp(_)))
            || self.bracketed(i, j)
            || (i + 1..j).any(|k| self.m(i, k) && self.m(k, j));
        self.memo.insert((i, j), r);
        r
    }

    fn s(&mut self) -> bool {
        let n = self.w.len();
        self.bracketed(0, n) || (0..=n).any(|k| self.m(0, k) && self.m(k, n))
    }
}

fn brute_force(s: &GrammarSkeleton, n: usize) -> u64 {
    let a = alphabet(s);
    let mut idx = vec![0usize; n];
    let mut count = 0;
    loop {
        let w: Vec<Tok> = idx.iter().map(|&i| a[i]).collect();
        if (Recogniser { w: &w, nullable: s.nullable, memo: HashMap::new() }).s() {
            count += 1;
        }
        let mut p = 0;
        loop {
            if p == n {
                return count;
            }
            idx[p] += 1;
            if idx[p] < a.len() {
                break;
            }
            idx[p] = 0;
            p += 1;
        }
    }
}

fn check(s: &GrammarSkeleton, max_len: usize) {
    for n in 1..=max_len {
        assert_eq!(count_architecture_strings(s, n), BigUint::from(brute_force(s, n)), "{s:?} length {n}");
    }
}

#[test]
fn dyck_language_up_to_length_8() {
    check(&GrammarSkeleton::dyck1(), 8);
}

#[test]
fn one_bracket_with_computations_up_to_length_8() {
    check(&GrammarSkeleton { brackets: vec![(1, 1)], computations: 1, nullable: false }, 8);
}

#[test]
fn nullable_with_two_computations_up_to_length_7() {
    check(&GrammarSkeleton { brackets: vec![(1, 1)], computations: 2, nullable: true }, 7);
}

#[test]
fn two_bracket_types_with_options_up_to_length_6() {
    check(&GrammarSkeleton { brackets: vec![(2, 1), (1, 2)], computations: 1, nullable: false }, 6);
}
