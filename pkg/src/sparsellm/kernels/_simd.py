"""Numba intrinsics emitting LLVM's target-independent masked expand/compress ops.

``llvm.masked.expandload`` is bitmask expansion in IR form: it reads
``popcount(mask)`` consecutive values and scatters them into the set lanes of
a vector. On AVX-512 it lowers to ``vexpandps``/``vpexpandb``; on other
targets LLVM scalarizes it, so these helpers stay correct everywhere.

Block masks store lane 0 in the most significant bit while LLVM's ``<16 x i1>``
maps lane 0 to bit 0, hence the ``bitreverse`` before every bitcast.

Callers must guarantee that ``x[xoff : xoff + width]`` is in bounds (pad the
input vector to the padded matrix width).
"""

from llvmlite import ir
from numba import types
from numba.core import cgutils
from numba.extending import intrinsic

_i1 = ir.IntType(1)
_i8 = ir.IntType(8)
_i16 = ir.IntType(16)
_i32 = ir.IntType(32)
_i64 = ir.IntType(64)
_f32 = ir.FloatType()


def _data_ptr(context, builder, aty, aval):
    return context.make_array(aty)(context, builder, aval).data


def _fn(builder, name, ret, args):
    return cgutils.get_or_insert_function(builder.module, ir.FunctionType(ret, args), name)


def _lane_mask16(builder, mask64):
    m16 = builder.trunc(mask64, _i16)
    rev = builder.call(_fn(builder, "llvm.bitreverse.i16", _i16, [_i16]), [m16])
    return m16, rev


def _pop16(builder, m16):
    return builder.zext(builder.call(_fn(builder, "llvm.ctpop.i16", _i16, [_i16]), [m16]), _i64)


@intrinsic
def expand_mul_split_f32(typingctx, vals, ptr, mask, x, xoff, out_a, cnt_a, out_b, cnt_b):
    """One ROWPAIR16 block: expand values, multiply by the paired inputs, and
    compress the even-lane (row A) and odd-lane (row B) products onto two
    streams. Returns ``(cnt_a, cnt_b, ptr)`` advanced past this block."""
    sig = types.UniTuple(types.int64, 3)(vals, ptr, mask, x, xoff, out_a, cnt_a, out_b, cnt_b)

    def codegen(context, builder, signature, args):
        vals_, ptr_, mask_, x_, xoff_, oa_, ca_, ob_, cb_ = args
        a = signature.args
        v16f = ir.VectorType(_f32, 16)
        v16b = ir.VectorType(_i1, 16)
        v8f = ir.VectorType(_f32, 8)
        vp = builder.gep(_data_ptr(context, builder, a[0], vals_), [ptr_])
        xp = builder.gep(_data_ptr(context, builder, a[3], x_), [xoff_])
        pa = builder.gep(_data_ptr(context, builder, a[5], oa_), [ca_])
        pb = builder.gep(_data_ptr(context, builder, a[7], ob_), [cb_])
        _, rev = _lane_mask16(builder, mask_)
        expand = _fn(builder, "llvm.masked.expandload.v16f32", v16f, [vp.type, v16b, v16f])
        lanes = builder.call(expand, [vp, builder.bitcast(rev, v16b), ir.Constant(v16f, [0.0] * 16)])
        xv = builder.load(builder.bitcast(xp, v8f.as_pointer()), align=4)
        pairs = ir.Constant(ir.VectorType(_i32, 16), [k // 2 for k in range(16)])
        prod = builder.fmul(lanes, builder.shuffle_vector(xv, xv, pairs))
        even = builder.and_(rev, ir.Constant(_i16, 0x5555))
        odd = builder.and_(rev, ir.Constant(_i16, 0xAAAA))
        compress = _fn(builder, "llvm.masked.compressstore.v16f32", ir.VoidType(), [v16f, pa.type, v16b])
        builder.call(compress, [prod, pa, builder.bitcast(even, v16b)])
        builder.call(compress, [prod, pb, builder.bitcast(odd, v16b)])
        na, nb_ = _pop16(builder, even), _pop16(builder, odd)
        vals_out = [builder.add(ca_, na), builder.add(cb_, nb_), builder.add(ptr_, builder.add(na, nb_))]
        return context.make_tuple(builder, signature.return_type, vals_out)

    return sig, codegen


@intrinsic
def expand_mul_compress_f32(typingctx, vals, ptr, mask, x, xoff, out, cnt):
    """One TILE row segment (16 consecutive columns of one row): expand, multiply,
    compress the nonzero products onto ``out``. Returns ``(cnt, ptr)``."""
    sig = types.UniTuple(types.int64, 2)(vals, ptr, mask, x, xoff, out, cnt)

    def codegen(context, builder, signature, args):
        vals_, ptr_, mask_, x_, xoff_, o_, c_ = args
        a = signature.args
        v16f = ir.VectorType(_f32, 16)
        v16b = ir.VectorType(_i1, 16)
        vp = builder.gep(_data_ptr(context, builder, a[0], vals_), [ptr_])
        xp = builder.gep(_data_ptr(context, builder, a[3], x_), [xoff_])
        po = builder.gep(_data_ptr(context, builder, a[5], o_), [c_])
        m16, rev = _lane_mask16(builder, mask_)
        bm = builder.bitcast(rev, v16b)
        expand = _fn(builder, "llvm.masked.expandload.v16f32", v16f, [vp.type, v16b, v16f])
        lanes = builder.call(expand, [vp, bm, ir.Constant(v16f, [0.0] * 16)])
        xv = builder.load(builder.bitcast(xp, v16f.as_pointer()), align=4)
        compress = _fn(builder, "llvm.masked.compressstore.v16f32", ir.VoidType(), [v16f, po.type, v16b])
        builder.call(compress, [builder.fmul(lanes, xv), po, bm])
        n = _pop16(builder, m16)
        return context.make_tuple(builder, signature.return_type, [builder.add(c_, n), builder.add(ptr_, n)])

    return sig, codegen


def _make_int8_dot(nblocks: int, duplicate_x: bool):
    width = 16 * nblocks

    def impl(typingctx, vals, ptr, masks, b0, x, xoff, acc):
        sig = types.int64(vals, ptr, masks, b0, x, xoff, acc)

        def codegen(context, builder, signature, args):
            vals_, ptr_, masks_, b0_, x_, xoff_, acc_ = args
            a = signature.args
            vw8 = ir.VectorType(_i8, width)
            vw16 = ir.VectorType(_i16, width)
            vw32 = ir.VectorType(_i32, width)
            vwb = ir.VectorType(_i1, width)
            wide = ir.IntType(width)
            vbase = _data_ptr(context, builder, a[0], vals_)
            mbase = _data_ptr(context, builder, a[2], masks_)
            xbase = _data_ptr(context, builder, a[4], x_)
            accp = builder.bitcast(_data_ptr(context, builder, a[6], acc_), vw32.as_pointer())
            brev = _fn(builder, "llvm.bitreverse.i16", _i16, [_i16])
            lane_bits = ir.Constant(wide, 0)
            for u in range(nblocks):
                m16 = builder.load(builder.gep(mbase, [builder.add(b0_, ir.Constant(_i64, u))]))
                part = builder.shl(builder.zext(builder.call(brev, [m16]), wide), ir.Constant(wide, 16 * u))
                lane_bits = builder.or_(lane_bits, part)
            expand = _fn(builder, f"llvm.masked.expandload.v{width}i8", vw8, [vbase.type, vwb, vw8])
            lanes = builder.call(expand, [builder.gep(vbase, [ptr_]), builder.bitcast(lane_bits, vwb),
                                          ir.Constant(vw8, [0] * width)])
            xp = builder.gep(xbase, [xoff_])
            if duplicate_x:
                half = ir.VectorType(_i8, width // 2)
                xv = builder.load(builder.bitcast(xp, half.as_pointer()), align=1)
                idx = ir.Constant(ir.VectorType(_i32, width), [k // 2 for k in range(width)])
                xv = builder.shuffle_vector(xv, xv, idx)
            else:
                xv = builder.load(builder.bitcast(xp, vw8.as_pointer()), align=1)
            # int8 x int8 fits in int16 exactly; widen to int32 only for accumulation
            prod = builder.mul(builder.sext(lanes, vw16), builder.sext(xv, vw16))
            builder.store(builder.add(builder.load(accp, align=4), builder.sext(prod, vw32)), accp, align=4)
            pop = _fn(builder, f"llvm.ctpop.i{width}", wide, [wide])
            n = builder.call(pop, [lane_bits])
            n = builder.zext(n, _i64) if width < 64 else n
            return builder.add(ptr_, n)

        return sig, codegen

    impl.__name__ = f"expand_dot_i8_{nblocks}blk{'_pairs' if duplicate_x else ''}"
    return intrinsic(impl)


# ROWPAIR16: lanes pair up input columns, so x is duplicated lane-wise.
expand_dot_i8_pairs_x4 = _make_int8_dot(4, True)
expand_dot_i8_pairs_x1 = _make_int8_dot(1, True)
# TILE: one row segment per block, 16 consecutive inputs.
expand_dot_i8_row_x1 = _make_int8_dot(1, False)


def _host_has(*features) -> bool:
    try:
        import llvmlite.binding as llb

        host = llb.get_host_cpu_features()
        return all(host.get(f, False) for f in features)
    except Exception:
        return False


# vpdpbusd needs AVX512-VNNI; without it LLVM cannot select the intrinsic at all
HAS_VNNI = _host_has("avx512vnni", "avx512bw")

# lanes 0..31 -> even lanes (row A), 32..63 -> odd lanes (row B)
_SPLIT_ROWS = [2 * k for k in range(32)] + [2 * k + 1 for k in range(32)]


@intrinsic
def rowpair_dot_i8_vnni(typingctx, vals, ptr, masks, b0, nquads, x):
    """Dot products of one ROWPAIR16 row pair over ``4 * nquads`` blocks.

    Per step: four masks become one 64-lane expand, lanes are regrouped by
    row, and ``vpdpbusd`` accumulates four adjacent products per int32 lane.
    That instruction wants an unsigned operand, so ``x`` is biased by +128 and
    ``128 * sum(w)`` (from a second dot against ones) is subtracted at the end.
    Accumulators live in registers for the whole row pair.
    Returns ``(ptr, dot_a, dot_b)``.
    """
    sig = types.UniTuple(types.int64, 3)(vals, ptr, masks, b0, nquads, x)

    def codegen(context, builder, signature, args):
        vals_, ptr_, masks_, b0_, nq_, x_ = args
        a = signature.args
        v16 = ir.VectorType(_i32, 16)
        v64b = ir.VectorType(_i1, 64)
        v64i8 = ir.VectorType(_i8, 64)
        v32i8 = ir.VectorType(_i8, 32)
        vbase = _data_ptr(context, builder, a[0], vals_)
        mbase = _data_ptr(context, builder, a[2], masks_)
        xbase = _data_ptr(context, builder, a[5], x_)
        accp = cgutils.alloca_once_value(builder, ir.Constant(v16, [0] * 16))
        wsp = cgutils.alloca_once_value(builder, ir.Constant(v16, [0] * 16))
        ptrp = cgutils.alloca_once_value(builder, ptr_)
        brev = _fn(builder, "llvm.bitreverse.i16", _i16, [_i16])
        expand = _fn(builder, "llvm.masked.expandload.v64i8", v64i8, [vbase.type, v64b, v64i8])
        dot = _fn(builder, "llvm.x86.avx512.vpdpbusd.512", v16, [v16, v16, v16])
        pop = _fn(builder, "llvm.ctpop.i64", _i64, [_i64])
        split = ir.Constant(ir.VectorType(_i32, 64), _SPLIT_ROWS)
        twice = ir.Constant(ir.VectorType(_i32, 64), list(range(32)) * 2)
        with cgutils.for_range(builder, nq_) as loop:
            q = loop.index
            bq = builder.add(b0_, builder.mul(q, ir.Constant(_i64, 4)))
            bits = ir.Constant(_i64, 0)
            for u in range(4):
                m = builder.load(builder.gep(mbase, [builder.add(bq, ir.Constant(_i64, u))]))
                part = builder.shl(builder.zext(builder.call(brev, [m]), _i64), ir.Constant(_i64, 16 * u))
                bits = builder.or_(bits, part)
            p = builder.load(ptrp)
            lanes = builder.call(expand, [builder.gep(vbase, [p]), builder.bitcast(bits, v64b),
                                          ir.Constant(v64i8, [0] * 64)])
            w = builder.bitcast(builder.shuffle_vector(lanes, lanes, split), v16)
            xp = builder.gep(xbase, [builder.mul(q, ir.Constant(_i64, 32))])
            xv = builder.load(builder.bitcast(xp, v32i8.as_pointer()), align=1)
            xu = builder.xor(xv, ir.Constant(v32i8, [0x80] * 32))
            xd = builder.bitcast(builder.shuffle_vector(xu, xu, twice), v16)
            builder.store(builder.call(dot, [builder.load(accp), xd, w]), accp)
            builder.store(builder.call(dot, [builder.load(wsp), ir.Constant(v16, [0x01010101] * 16), w]), wsp)
            builder.store(builder.add(p, builder.call(pop, [bits])), ptrp)
        acc = builder.load(accp)
        ws = builder.load(wsp)
        v8 = ir.VectorType(_i32, 8)
        v8w = ir.VectorType(_i64, 8)
        red = _fn(builder, "llvm.vector.reduce.add.v8i64", _i64, [v8w])

        def half_sum(v, lo):
            h = builder.shuffle_vector(v, v, ir.Constant(v8, list(range(lo, lo + 8))))
            return builder.call(red, [builder.sext(h, v8w)])

        bias = ir.Constant(_i64, 128)
        ra = builder.sub(half_sum(acc, 0), builder.mul(bias, half_sum(ws, 0)))
        rb = builder.sub(half_sum(acc, 8), builder.mul(bias, half_sum(ws, 8)))
        return context.make_tuple(builder, signature.return_type, [builder.load(ptrp), ra, rb])

    return sig, codegen
