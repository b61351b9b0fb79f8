//! Conservative legality checks.
//!
//! Dependences are distance vectors over affine array subscripts. Entries
//! that cannot be pinned to a constant are `None` and stand for any
//! direction. Any reference the analysis cannot describe makes reordering
//! steps illegal; a `true` answer is always sound for the supported subset.

use std::collections::BTreeSet;

use super::expr::{Access, Affine};
use super::{ForLoop, LoopNest, Stmt, StmtEffects};
use crate::mutate::{TransformationStep, TILE_LEVELS, UNROLL_AND_JAM_FACTORS, UNROLL_AND_JAM_LEVELS, UNROLL_FACTORS};

/// Distance per band level; `None` means unknown (any direction).
pub type DependenceVector = Vec<Option<i64>>;

/// Is `step` provably semantics-preserving on `nest`?
pub fn legality(nest: &LoopNest, step: &TransformationStep) -> bool {
    match *step {
        TransformationStep::Unrolling { factor } => {
            UNROLL_FACTORS.contains(&factor) && unroll_legal(nest)
        }
        TransformationStep::UnrollAndJam { level, factor } => {
            UNROLL_AND_JAM_FACTORS.contains(&factor)
                && UNROLL_AND_JAM_LEVELS.contains(&level)
                && unroll_and_jam_legal(nest, level)
        }
        TransformationStep::Tiling { level, size } => {
            size >= 1 && TILE_LEVELS.contains(&level) && tiling_legal(nest, level)
        }
        TransformationStep::Interchange { perm } => interchange_legal(nest, perm),
        TransformationStep::Distribution => distribution_legal(nest),
    }
}

/// Header and body facts that every transformation relies on: the body
/// leaves the induction variable and the bound symbols alone, has no jumps,
/// no impure calls and no writes through pointers.
pub fn loop_well_formed(l: &ForLoop) -> bool {
    if l.header.step < 1 {
        return false;
    }
    let Ok(fx) = l.body.analyze() else { return false };
    if fx.jumps || !fx.fx.impure_calls.is_empty() || fx.has_opaque_write() {
        return false;
    }
    let written = fx.written_names();
    !written.contains(&l.header.var) && l.header.bound_symbols().is_disjoint(&written)
}

fn innermost_loops<'a>(stmts: &'a [Stmt], out: &mut Vec<&'a ForLoop>) {
    for s in stmts {
        s.walk(&mut |x| {
            if let Stmt::For(l) = x {
                if !l.body.contains_loop() {
                    out.push(l);
                }
            }
        });
    }
}

fn unroll_legal(nest: &LoopNest) -> bool {
    let mut inner = Vec::new();
    innermost_loops(&nest.stmts, &mut inner);
    !inner.is_empty() && inner.into_iter().all(loop_well_formed)
}

fn tiling_legal(nest: &LoopNest, level: usize) -> bool {
    let chain = nest.chain();
    // Strip-mining keeps the iteration order; single loops are left to unrolling.
    chain.len() >= 2 && level >= 1 && level <= chain.len() && loop_well_formed(chain[level - 1])
}

/// Chain loops whose bounds do not mention any induction variable of `vars`.
fn bounds_independent_of(loops: &[&ForLoop], vars: &BTreeSet<String>) -> bool {
    loops.iter().all(|l| l.header.bound_symbols().is_disjoint(vars))
}

fn unroll_and_jam_legal(nest: &LoopNest, level: usize) -> bool {
    let chain = nest.chain();
    let depth = chain.len();
    if !nest.perfectly_nested() || depth < 2 || level >= depth || level < 1 {
        return false;
    }
    if !chain.iter().all(|l| loop_well_formed(l)) {
        return false;
    }
    let moved: BTreeSet<String> = std::iter::once(chain[level - 1].header.var.clone()).collect();
    if !bounds_independent_of(&chain[level..], &moved) {
        return false;
    }
    // Jamming is legal when carrying `level` innermost is.
    let mut order: Vec<usize> = (0..depth).filter(|&k| k != level - 1).collect();
    order.push(level - 1);
    match band_dependences(nest) {
        Some(deps) => permutation_respects(&deps, &order),
        None => false,
    }
}

fn interchange_legal(nest: &LoopNest, perm: usize) -> bool {
    let chain = nest.chain();
    let depth = chain.len();
    if !nest.perfectly_nested() || depth < 2 || perm < 2 || perm > crate::mutate::MAX_PERM {
        return false;
    }
    let Some(order) = nth_permutation(depth, perm) else { return false };
    if !chain.iter().all(|l| loop_well_formed(l)) {
        return false;
    }
    let vars: BTreeSet<String> = chain.iter().map(|l| l.header.var.clone()).collect();
    if !bounds_independent_of(&chain, &vars) {
        return false;
    }
    match band_dependences(nest) {
        Some(deps) => permutation_respects(&deps, &order),
        None => false,
    }
}

fn distribution_legal(nest: &LoopNest) -> bool {
    if nest.stmts.is_empty() {
        return false;
    }
    nest.stmts.iter().all(|s| match s {
        Stmt::For(l) => {
            let band = perfect_band(l);
            band.iter().all(|b| loop_well_formed(b))
                && distribution_groups(band.last().expect("non-empty band").body.items())
                    .is_some_and(|g| g.len() >= 2)
        }
        _ => false,
    })
}

/// Loops from `l` down while each body is exactly one loop.
pub fn perfect_band(l: &ForLoop) -> Vec<&ForLoop> {
    let mut out = vec![l];
    let mut cur = l;
    while let [Stmt::For(inner)] = cur.body.items() {
        out.push(inner);
        cur = inner;
    }
    out
}

/// Partition `items` into groups with no shared conflicting variable.
///
/// Returns statement-index groups ordered by their first statement, or
/// `None` if some statement cannot be analyzed.
pub fn distribution_groups(items: &[Stmt]) -> Option<Vec<Vec<usize>>> {
    let effects: Vec<StmtEffects> = items.iter().map(|s| s.analyze().ok()).collect::<Option<_>>()?;
    if effects.iter().any(|e| e.fx.accesses.iter().any(|a| a.opaque) || e.jumps || !e.fx.impure_calls.is_empty()) {
        return None;
    }
    let n = items.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut c = x;
        while p[c] != r {
            let next = p[c];
            p[c] = r;
            c = next;
        }
        r
    }
    let private = |e: &StmtEffects, name: &str| e.inner_vars.contains(name) && !e.locals.contains(name);
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&effects[i], &effects[j]);
            let conflict = a.fx.accesses.iter().any(|x| {
                b.fx.accesses.iter().any(|y| {
                    x.name == y.name
                        && (x.mode.writes() || y.mode.writes())
                        && !(private(a, &x.name) && private(b, &y.name))
                })
            });
            if conflict {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri.max(rj)] = ri.min(rj);
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut root_of_group: Vec<usize> = Vec::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        match root_of_group.iter().position(|&x| x == r) {
            Some(g) => groups[g].push(i),
            None => {
                root_of_group.push(r);
                groups.push(vec![i]);
            }
        }
    }
    Some(groups)
}

/// Dependence vectors of a perfect nest's body over its band, or `None`
/// when some reference cannot be analyzed.
pub fn band_dependences(nest: &LoopNest) -> Option<Vec<DependenceVector>> {
    let chain = nest.chain();
    let vars: Vec<String> = chain.iter().map(|l| l.header.var.clone()).collect();
    let body = chain.last()?.body.as_ref();
    let fx = body.analyze().ok()?;
    if fx.jumps || !fx.fx.impure_calls.is_empty() {
        return None;
    }
    let depth = vars.len();
    let private: BTreeSet<&str> = fx.locals.iter().chain(&fx.inner_vars).map(String::as_str).collect();
    let accesses: Vec<&Access> = fx
        .fx
        .accesses
        .iter()
        .filter(|a| !private.contains(a.name.as_str()) && !vars.contains(&a.name))
        .collect();
    let any_write = accesses.iter().any(|a| a.mode.writes());
    if any_write && accesses.iter().any(|a| a.opaque) {
        return None;
    }
    let mut deps = Vec::new();
    for (i, a) in accesses.iter().enumerate() {
        for b in &accesses[i..] {
            if a.name != b.name || !(a.mode.writes() || b.mode.writes()) {
                continue;
            }
            if let Some(d) = pair_distance(a, b, &vars, &private) {
                deps.push(d);
            }
        }
    }
    let _ = depth;
    Some(deps)
}

/// Distance `I_b - I_a` for iterations where `a` and `b` touch the same
/// location; `None` if they never do.
fn pair_distance(a: &Access, b: &Access, vars: &[String], private: &BTreeSet<&str>) -> Option<DependenceVector> {
    let unknown = vec![None; vars.len()];
    let (Some(sa), Some(sb)) = (&a.subscripts, &b.subscripts) else {
        return Some(unknown);
    };
    if sa.len() != sb.len() {
        return Some(unknown);
    }
    // One equation per dimension: coeffs . delta = rhs
    let mut equations: Vec<(Vec<i64>, i64)> = Vec::new();
    for (ea, eb) in sa.iter().zip(sb) {
        let (Some(fa), Some(fb)) = (Affine::from_expr(ea), Affine::from_expr(eb)) else {
            return Some(unknown);
        };
        let coeffs_a: Vec<i64> = vars.iter().map(|v| fa.coeff(v)).collect();
        let coeffs_b: Vec<i64> = vars.iter().map(|v| fb.coeff(v)).collect();
        if coeffs_a != coeffs_b {
            return Some(unknown);
        }
        let mut rest_a = fa.clone();
        let mut rest_b = fb.clone();
        for v in vars {
            rest_a.coeffs.remove(v);
            rest_b.coeffs.remove(v);
        }
        if rest_a.coeffs.keys().chain(rest_b.coeffs.keys()).any(|k| private.contains(k.as_str())) {
            return Some(unknown);
        }
        let Some(diff) = rest_a.sub(&rest_b).and_then(|d| d.as_constant()) else {
            return Some(unknown);
        };
        equations.push((coeffs_a, diff));
    }
    solve_distances(&equations, vars.len())
}

/// Solve integer equations for the distance vector, leaving unconstrained
/// entries unknown. `None` means the system has no integer solution.
pub fn solve_distances(equations: &[(Vec<i64>, i64)], n: usize) -> Option<DependenceVector> {
    let mut known: Vec<Option<i64>> = vec![None; n];
    let mut progress = true;
    while progress {
        progress = false;
        for (coeffs, rhs) in equations {
            let mut rhs = *rhs;
            let mut free = Vec::new();
            for (k, &c) in coeffs.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                match known[k] {
                    Some(d) => rhs -= c * d,
                    None => free.push((k, c)),
                }
            }
            match free.as_slice() {
                [] => {
                    if rhs != 0 {
                        return None;
                    }
                }
                [(k, c)] => {
                    if rhs % c != 0 {
                        return None;
                    }
                    known[*k] = Some(rhs / c);
                    progress = true;
                }
                _ => {}
            }
        }
    }
    Some(known)
}

/// The `perm`-th (1-based) lexicographic permutation of `0..depth`.
pub fn nth_permutation(depth: usize, perm: usize) -> Option<Vec<usize>> {
    let total: usize = (1..=depth).product();
    if perm < 1 || perm > total {
        return None;
    }
    let mut pool: Vec<usize> = (0..depth).collect();
    let mut k = perm - 1;
    let mut out = Vec::with_capacity(depth);
    for i in (0..depth).rev() {
        let f: usize = (1..=i).product();
        out.push(pool.remove(k / f));
        k %= f;
    }
    Some(out)
}

/// Does executing the band in `order` (new position -> old level) keep every
/// dependence lexicographically positive?
pub fn permutation_respects(deps: &[DependenceVector], order: &[usize]) -> bool {
    deps.iter().all(|d| {
        let choices: Vec<Vec<i64>> = d
            .iter()
            .map(|e| match e {
                Some(v) => vec![v.signum()],
                None => vec![-1, 0, 1],
            })
            .collect();
        let mut signs = vec![0i64; d.len()];
        all_sign_vectors(&choices, 0, &mut signs, &mut |s| {
            let Some(first) = s.iter().find(|&&x| x != 0) else { return true };
            let flip = if *first < 0 { -1 } else { 1 };
            let permuted = order.iter().map(|&k| s[k] * flip);
            permuted.into_iter().find(|&x| x != 0).is_none_or(|x| x > 0)
        })
    })
}

fn all_sign_vectors(choices: &[Vec<i64>], k: usize, cur: &mut Vec<i64>, check: &mut impl FnMut(&[i64]) -> bool) -> bool {
    if k == choices.len() {
        return check(cur);
    }
    for &c in &choices[k] {
        cur[k] = c;
        if !all_sign_vectors(choices, k + 1, cur, check) {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexer::tokenize_loop;
    use crate::loopir::parse_nest;
    use TransformationStep::*;

    fn nest(src: &str) -> LoopNest {
        parse_nest(&tokenize_loop("t", src).unwrap()).unwrap()
    }

    #[test]
    fn interchange_needs_two_loops() {
        let n = nest("for(i=0;i<n;i++) a[i]=0;");
        assert!(!legality(&n, &Interchange { perm: 2 }));
    }

    #[test]
    fn distribution_needs_two_statements() {
        let n = nest("for(i=0;i<n;i++) a[i]=0;");
        assert!(!legality(&n, &Distribution));
        let n = nest("for(i=0;i<n;i++) { a[i]=i; b[i]=i; }");
        assert!(legality(&n, &Distribution));
        let n = nest("for(i=0;i<n;i++) { a[i]=i; b[i]=a[i]; }");
        assert!(!legality(&n, &Distribution));
    }

    #[test]
    fn interchange_dependence_cases() {
        let ok = nest("for(i=0;i<n;i++) for(j=0;j<m;j++) c[i][j] = a[i][j] + 1;");
        assert!(legality(&ok, &Interchange { perm: 2 }));
        // (1,-1) becomes (-1,1) after swapping.
        let bad = nest("for(i=1;i<n;i++) for(j=0;j<m-1;j++) a[i][j] = a[i-1][j+1];");
        assert!(!legality(&bad, &Interchange { perm: 2 }));
        // (1,1) stays positive.
        let fine = nest("for(i=1;i<n;i++) for(j=1;j<m;j++) a[i][j] = a[i-1][j-1];");
        assert!(legality(&fine, &Interchange { perm: 2 }));
        let reduction = nest("for(i=0;i<n;i++) for(j=0;j<m;j++) s += a[i][j];");
        assert!(!legality(&reduction, &Interchange { perm: 2 }));
        let triangular = nest("for(i=0;i<n;i++) for(j=0;j<i;j++) a[i][j] = 0;");
        assert!(!legality(&triangular, &Interchange { perm: 2 }));
    }

    #[test]
    fn unroll_and_tiling() {
        let n = nest("for(i=0;i<n;i++) a[i] = a[i-1] + 1;");
        assert!(legality(&n, &Unrolling { factor: 2 }));
        assert!(!legality(&n, &Unrolling { factor: 3 }));
        assert!(!legality(&n, &Tiling { level: 1, size: 8 }));
        let modifies_bound = nest("for(i=0;i<n;i++) n = n - 1;");
        assert!(!legality(&modifies_bound, &Unrolling { factor: 2 }));
        let two = nest("for(i=0;i<n;i++) for(j=0;j<m;j++) c[i][j] += 1;");
        assert!(legality(&two, &Tiling { level: 2, size: 8 }));
        assert!(!legality(&two, &Tiling { level: 3, size: 8 }));
        assert!(legality(&two, &UnrollAndJam { level: 1, factor: 2 }));
        assert!(!legality(&two, &UnrollAndJam { level: 2, factor: 2 }));
    }

    #[test]
    fn permutations_are_lexicographic() {
        assert_eq!(nth_permutation(3, 1), Some(vec![0, 1, 2]));
        assert_eq!(nth_permutation(3, 2), Some(vec![0, 2, 1]));
        assert_eq!(nth_permutation(3, 6), Some(vec![2, 1, 0]));
        assert_eq!(nth_permutation(3, 7), None);
    }

    #[test]
    fn solver() {
        // i-delta = 1 and i-delta + j-delta = 3
        assert_eq!(solve_distances(&[(vec![1, 0], 1), (vec![1, 1], 3)], 2), Some(vec![Some(1), Some(2)]));
        assert_eq!(solve_distances(&[(vec![2, 0], 1)], 2), None);
        assert_eq!(solve_distances(&[(vec![0, 0], 0)], 2), Some(vec![None, None]));
    }
}
